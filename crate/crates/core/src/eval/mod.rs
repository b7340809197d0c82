//! Surface extraction, Chamfer distance and sampling diagnostics.

pub mod chamfer;
pub mod mesh;

pub use chamfer::{chamfer, sample_surface, ChamferConfig, ChamferReport, GroundTruth, TriangleGrid, CHAMFER_SCALE};
pub use mesh::{extract_mesh, extract_mesh_in, unit_box, TriangleMesh};

use crate::field::ImplicitSurface;
use crate::geometry::{Ray, Vec3};
use crate::render::{propose, proposal_points, ray_intervals, Guidance};
use crate::rng::{substream, uniform_in_ball};
use crate::sampler::SamplerConfig;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Fraction of proposal samples with `|f − h| < threshold`.
    pub near_surface_fraction: f64,
    pub mean_samples_per_ray: f64,
    pub total_samples: usize,
    pub rays: usize,
    pub threshold: f64,
}

/// Where proposals land relative to the surface of `f`. Ray `i` always uses
/// substream `i` of `seed`, so guided and unguided runs share randomness.
pub fn sampling_efficiency(
    f: &dyn ImplicitSurface,
    guidance: Option<Guidance<'_>>,
    rays: &[Ray],
    cfg: &SamplerConfig,
    threshold: f64,
    seed: u64,
) -> Result<EfficiencyReport> {
    let ids: Vec<u64> = (0..rays.len() as u64).collect();
    let intervals = ray_intervals(rays, guidance)?;
    let sets = propose(f, rays, &ids, &intervals, cfg, 64, seed, 0);
    let points = proposal_points(rays, &sets);
    let h = f.level();
    let near = f.values(&points).iter().filter(|v| (*v - h).abs() < threshold).count();
    let total = points.len();
    Ok(EfficiencyReport {
        near_surface_fraction: if total == 0 { 0.0 } else { near as f64 / total as f64 },
        mean_samples_per_ray: if rays.is_empty() { 0.0 } else { total as f64 / rays.len() as f64 },
        total_samples: total,
        rays: rays.len(),
        threshold,
    })
}

/// Fixed probe rays: origins on a sphere of radius `distance`, aimed at random
/// points inside a ball of radius `target_radius`, clipped to the unit ball.
pub fn probe_rays(n: usize, distance: f64, target_radius: f64, seed: u64) -> Vec<Ray> {
    let mut rng = substream(seed, 0);
    let mut rays = Vec::with_capacity(n);
    while rays.len() < n {
        let o = random_direction(&mut rng) * distance;
        let t = uniform_in_ball(&mut rng) * target_radius;
        if let Some(r) = Ray::through_bounds(o, t - o, 1.0) {
            rays.push(r);
        }
    }
    rays
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = uniform_in_ball(rng);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}
