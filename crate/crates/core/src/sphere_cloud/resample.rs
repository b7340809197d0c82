use super::{CenterOptimizer, SphereCloud};
use crate::field::ImplicitSurface;
use crate::geometry::Vec3;
use crate::rng::{gaussian3, substream, uniform_in_ball};
use crate::{Error, Result};
use rand::{Rng, RngCore};
use rayon::prelude::*;

/// Radius of the ball centers are kept in.
pub const OOB_RADIUS: f64 = 1.05;

/// Centers projected onto the boundary sit at `OOB_RADIUS` up to rounding;
/// they count as escaped.
const PINNED_RADIUS: f64 = OOB_RADIUS * (1.0 - 1e-12);

const MAX_RELOCATION_TRIES: usize = 64;

/// When empty-sphere and out-of-bounds resampling fire during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudSchedule {
    pub empty_iterations: Vec<u64>,
    pub oob_period: u64,
}

impl CloudSchedule {
    /// `empty_count` resamples at evenly spaced fractions `j/(empty_count+1)` of
    /// the run; out-of-bounds checks every `oob_period` iterations (0 disables).
    pub fn for_run(n_total: u64, empty_count: u32, oob_period: u64) -> Self {
        let mut empty_iterations: Vec<u64> = (1..=empty_count as u64)
            .map(|j| (n_total as f64 * j as f64 / (empty_count as f64 + 1.0)).round() as u64)
            .filter(|&n| n > 0 && n < n_total)
            .collect();
        empty_iterations.dedup();
        Self {
            empty_iterations,
            oob_period,
        }
    }

    pub fn empty_due(&self, n: u64) -> bool {
        self.empty_iterations.binary_search(&n).is_ok()
    }

    pub fn oob_due(&self, n: u64) -> bool {
        self.oob_period > 0 && n > 0 && n % self.oob_period == 0
    }
}

fn interior_offsets(check_seed: u64, sphere: usize, k: usize) -> Vec<Vec3> {
    let mut rng = substream(check_seed, sphere as u64);
    (0..k).map(|_| uniform_in_ball(&mut rng)).collect()
}

fn is_empty_at(center: &Vec3, radius: f64, offsets: &[Vec3], f: &dyn ImplicitSurface) -> bool {
    let pts: Vec<Vec3> = offsets.iter().map(|o| center + o * radius).collect();
    let h = f.level();
    let vals = f.values(&pts);
    vals.iter().all(|&v| v > h) || vals.iter().all(|&v| v < h)
}

/// Which spheres have all `k` interior samples strictly on one side of the
/// level set. Sample offsets for sphere `i` come from substream `i` of
/// `check_seed`, so the check can be replayed exactly.
pub fn empty_mask(cloud: &SphereCloud, f: &dyn ImplicitSurface, k: usize, check_seed: u64) -> Vec<bool> {
    let r = cloud.radius();
    cloud
        .centers()
        .par_iter()
        .enumerate()
        .map(|(i, c)| is_empty_at(c, r, &interior_offsets(check_seed, i, k), f))
        .collect()
}

fn draw_near<R: Rng + ?Sized>(rng: &mut R, anchor: &Vec3, sigma: f64) -> Vec3 {
    loop {
        let c = anchor + gaussian3(rng, sigma);
        if c.norm() < PINNED_RADIUS {
            return c;
        }
    }
}

/// Relocate every empty sphere next to a uniformly chosen non-empty one
/// (Gaussian offset with std `sigma`) and reset its optimizer moments.
/// Returns the number of relocated spheres and the seed used for the check.
pub fn resample_empty(
    cloud: &mut SphereCloud,
    f: &dyn ImplicitSurface,
    k: usize,
    sigma: f64,
    opt: &mut CenterOptimizer,
) -> Result<(usize, u64)> {
    let check_seed = cloud.rng().next_u64();
    let marked = empty_mask(cloud, f, k, check_seed);
    let survivors: Vec<usize> = (0..marked.len()).filter(|&i| !marked[i]).collect();
    if survivors.is_empty() {
        return Err(Error::AllSpheresEmpty);
    }
    let r = cloud.radius();
    let mut count = 0;
    for i in 0..marked.len() {
        if !marked[i] {
            continue;
        }
        let offsets = interior_offsets(check_seed, i, k);
        let mut c = Vec3::zeros();
        for _ in 0..MAX_RELOCATION_TRIES {
            let s = survivors[cloud.rng().random_range(0..survivors.len())];
            let anchor = cloud.centers()[s];
            c = draw_near(cloud.rng(), &anchor, sigma);
            if !is_empty_at(&c, r, &offsets, f) {
                break;
            }
        }
        cloud.centers_mut()[i] = c;
        opt.reset(i);
        count += 1;
    }
    Ok((count, check_seed))
}

/// Redraw centers that escaped the 1.05 ball next to in-bounds centers.
pub fn resample_out_of_bounds(cloud: &mut SphereCloud, sigma: f64, opt: &mut CenterOptimizer) -> usize {
    let out: Vec<bool> = cloud.centers().iter().map(|c| c.norm() >= PINNED_RADIUS).collect();
    if !out.iter().any(|&o| o) {
        return 0;
    }
    let survivors: Vec<usize> = (0..out.len()).filter(|&i| !out[i]).collect();
    let mut count = 0;
    for i in 0..out.len() {
        if !out[i] {
            continue;
        }
        let c = if survivors.is_empty() {
            uniform_in_ball(cloud.rng())
        } else {
            let s = survivors[cloud.rng().random_range(0..survivors.len())];
            let anchor = cloud.centers()[s];
            draw_near(cloud.rng(), &anchor, sigma)
        };
        cloud.centers_mut()[i] = c;
        opt.reset(i);
        count += 1;
    }
    count
}
