//! Exact ray, sphere and interval primitives plus a uniform-grid index for
//! sphere-cloud queries. Everything here is double precision.

mod index;
mod interval;
mod ray;

pub use index::{cloud_intervals, cloud_intervals_exhaustive, point_in_cloud, point_in_cloud_exhaustive, Aabb, SphereIndex};
pub use interval::{interval_union, Interval, IntervalSet, MERGE_EPS};
pub use ray::{ray_sphere_intersect, Ray};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Radius of the scene bounding sphere. Scenes are scaled to fit inside it.
pub const SCENE_RADIUS: f64 = 1.0;
