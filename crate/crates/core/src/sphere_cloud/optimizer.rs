use super::losses::{repulsion_loss, surface_loss, RepulsionConfig};
use super::resample::OOB_RADIUS;
use super::{RadiusSchedule, SphereCloud};
use crate::adam::AdamConfig;
use crate::field::ImplicitSurface;
use crate::geometry::Vec3;
use crate::Result;

/// Adam moments per center coordinate. Step counters are per center because
/// relocated centers restart their bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterOptimizer {
    pub lr: f64,
    pub cfg: AdamConfig,
    pub m: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub steps: Vec<u64>,
}

impl CenterOptimizer {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            cfg: AdamConfig::default(),
            m: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            steps: vec![0; n],
        }
    }

    pub fn reset(&mut self, i: usize) {
        self.m[i] = Vec3::zeros();
        self.v[i] = Vec3::zeros();
        self.steps[i] = 0;
    }

    fn apply(&mut self, i: usize, c: &mut Vec3, g: &Vec3) {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for a in 0..3 {
            self.m[i][a] = beta1 * self.m[i][a] + (1.0 - beta1) * g[a];
            self.v[i][a] = beta2 * self.v[i][a] + (1.0 - beta2) * g[a] * g[a];
            c[a] -= self.lr * (self.m[i][a] / bc1) / ((self.v[i][a] / bc2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub surface_loss: f64,
    pub repulsion_loss: f64,
}

/// One optimizer step on `L_surf + λ·L_rep`, projection into the 1.05 ball,
/// and the radius update for the next iteration.
pub fn step_centers(
    cloud: &mut SphereCloud,
    f: &dyn ImplicitSurface,
    cfg: &RepulsionConfig,
    opt: &mut CenterOptimizer,
    schedule: &RadiusSchedule,
) -> Result<StepStats> {
    let (surf, mut grads) = surface_loss(cloud, f)?;
    let mut rep = 0.0;
    if cfg.lambda > 0.0 {
        let (l, g) = repulsion_loss(cloud, cfg);
        rep = l;
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b * cfg.lambda;
        }
    }
    let centers = cloud.centers_mut();
    for (i, (c, g)) in centers.iter_mut().zip(&grads).enumerate() {
        opt.apply(i, c, g);
        let n = c.norm();
        if n > OOB_RADIUS {
            *c *= OOB_RADIUS / n;
        }
    }
    let next = cloud.iteration() + 1;
    cloud.set_iteration(next);
    cloud.set_radius(schedule.radius_at(next));
    Ok(StepStats {
        surface_loss: surf,
        repulsion_loss: rep,
    })
}
