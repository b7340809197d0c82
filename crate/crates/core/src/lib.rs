//! Sphere-guided training of neural implicit surfaces.
//!
//! A coarse sphere cloud is optimized jointly with a neural signed distance
//! (or occupancy) field. The cloud restricts where training rays are drawn
//! and where samples are placed along each ray during volumetric ray
//! marching, so the field spends its sample budget near the surface.
//!
//! Module map:
//! - [`geometry`]: rays, interval sets, and the sphere-cloud grid index.
//! - [`sphere_cloud`]: the trainable cloud, its losses, optimizer and resampling.
//! - [`field`]: analytic SDF scenes and the trainable MLP field.
//! - [`sampler`]: interval-restricted proposals, importance upsampling, root finding.
//! - [`render`]: discretized volume rendering with exact backpropagation.
//! - [`dataset`]: cameras and synthetic multi-view datasets.
//! - [`trainer`]: the alternating optimization loop.
//! - [`eval`]: marching cubes, Chamfer distance, and sampling diagnostics.

pub mod adam;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod render;
pub mod rng;
pub mod sampler;
pub mod sphere_cloud;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Interval, IntervalSet, Ray, SphereIndex, Vec3};
pub use sphere_cloud::SphereCloud;
