//! The sphere cloud: M equal-radius spheres whose union bounds where rays are
//! sampled. Centers are pulled onto the field's level set, pushed apart by a
//! short-range repulsion, and relocated when they drift into empty space.

mod checkpoint;
mod losses;
mod optimizer;
mod resample;

pub use losses::{
    knn_within, repulsion_loss, repulsion_loss_exhaustive, surface_loss, RepulsionConfig,
};
pub use optimizer::{step_centers, CenterOptimizer, StepStats};
pub use resample::{empty_mask, resample_empty, resample_out_of_bounds, CloudSchedule, OOB_RADIUS};

use crate::geometry::Vec3;
use crate::rng::uniform_in_ball;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Exponential radius decay clamped at `r_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusSchedule {
    pub r_max: f64,
    pub r_min: f64,
    pub beta: f64,
}

/// Fraction of training after which the radius sits at its floor.
pub const RADIUS_FLOOR_FRACTION: f64 = 0.45;

impl RadiusSchedule {
    /// Schedule reaching `r_min` after `RADIUS_FLOOR_FRACTION * n_total` iterations.
    pub fn for_run(r_max: f64, r_min: f64, n_total: u64) -> Self {
        let beta = (r_max / r_min).ln() / (RADIUS_FLOOR_FRACTION * n_total.max(1) as f64);
        Self { r_max, r_min, beta }
    }

    pub fn radius_at(&self, n: u64) -> f64 {
        schedule_radius(n, self)
    }

    /// First iteration at which the radius equals `r_min`.
    pub fn floor_iteration(&self) -> u64 {
        let mut n = ((self.r_max / self.r_min).ln() / self.beta).floor().max(0.0) as u64;
        while self.radius_at(n) > self.r_min {
            n += 1;
        }
        while n > 0 && self.radius_at(n - 1) <= self.r_min {
            n -= 1;
        }
        n
    }
}

pub fn schedule_radius(n: u64, sched: &RadiusSchedule) -> f64 {
    (sched.r_max * (-(n as f64) * sched.beta).exp()).max(sched.r_min)
}

#[derive(Debug, Clone)]
pub struct SphereCloud {
    centers: Vec<Vec3>,
    radius: f64,
    iteration: u64,
    rng: ChaCha8Rng,
    version: u64,
}

impl PartialEq for SphereCloud {
    fn eq(&self, other: &Self) -> bool {
        self.centers == other.centers
            && self.radius.to_bits() == other.radius.to_bits()
            && self.iteration == other.iteration
            && self.rng == other.rng
    }
}

impl SphereCloud {
    /// `m` centers i.i.d. uniform in the unit ball at radius `r_max`.
    pub fn init(m: usize, seed: u64, r_max: f64) -> Self {
        assert!(m >= 1, "sphere cloud needs at least one sphere");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..m).map(|_| uniform_in_ball(&mut rng)).collect();
        Self {
            centers,
            radius: r_max,
            iteration: 0,
            rng,
            version: 0,
        }
    }

    pub fn from_centers(centers: Vec<Vec3>, radius: f64, seed: u64) -> Self {
        Self {
            centers,
            radius,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            version: 0,
        }
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    /// Mutable access to the centers; invalidates any index built earlier.
    pub fn centers_mut(&mut self) -> &mut [Vec3] {
        self.version += 1;
        &mut self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn set_radius(&mut self, r: f64) {
        if r != self.radius {
            self.version += 1;
        }
        self.radius = r;
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_iteration(&mut self, n: u64) {
        self.iteration = n;
    }

    /// Counter bumped on every mutation; used to detect stale indices.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Median distance from each center to its nearest other center.
    pub fn median_nn_distance(&self) -> f64 {
        if self.centers.len() < 2 {
            return 0.0;
        }
        let mut d: Vec<f64> = knn_within(&self.centers, 1, f64::INFINITY)
            .into_iter()
            .map(|n| n[0].1)
            .collect();
        d.sort_by(f64::total_cmp);
        let m = d.len();
        if m % 2 == 1 {
            d[m / 2]
        } else {
            0.5 * (d[m / 2 - 1] + d[m / 2])
        }
    }
}
