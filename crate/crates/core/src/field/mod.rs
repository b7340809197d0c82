//! Implicit geometry: analytic SDF scenes and the trainable MLP field.

pub mod analytic;
pub mod dense;
pub mod mlp;

pub use analytic::{Scene, SceneNode};
pub use dense::{Activation, Dense, DenseTape};
pub use mlp::{eikonal_loss, FieldMode, MlpConfig, MlpField, MlpTape};

use crate::geometry::Vec3;

/// A scalar field whose `level()` set is the surface.
pub trait ImplicitSurface: Sync {
    fn level(&self) -> f64;

    fn value(&self, x: &Vec3) -> f64;

    fn value_grad(&self, x: &Vec3) -> (f64, Vec3);

    fn gradient(&self, x: &Vec3) -> Vec3 {
        self.value_grad(x).1
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        xs.iter().map(|x| self.value(x)).collect()
    }

    fn values_grads(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        xs.iter().map(|x| self.value_grad(x)).collect()
    }
}

/// Constant field, mostly useful in tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField {
    pub value: f64,
    pub level: f64,
}

impl ImplicitSurface for ConstantField {
    fn level(&self) -> f64 {
        self.level
    }

    fn value(&self, _: &Vec3) -> f64 {
        self.value
    }

    fn value_grad(&self, _: &Vec3) -> (f64, Vec3) {
        (self.value, Vec3::zeros())
    }
}
