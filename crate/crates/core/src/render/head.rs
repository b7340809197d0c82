use super::Rgb;
use crate::field::mlp::sigmoid;
use crate::field::{Activation, Dense, DenseTape};
use ndarray::Array2;
use rand::Rng;

/// Maps `[position, view direction, normal, features]` to RGB through a ReLU
/// MLP and a sigmoid. With no hidden layers it is a linear map plus sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceHead {
    net: Dense,
}

pub const GEOMETRY_INPUTS: usize = 9;

impl RadianceHead {
    pub fn new<R: Rng + ?Sized>(features: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![GEOMETRY_INPUTS + features];
        sizes.extend_from_slice(hidden);
        sizes.push(3);
        let mut net = Dense::new(&sizes, Activation::Relu);
        net.init_default(rng);
        Self { net }
    }

    pub fn from_dense(net: Dense) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Dense {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.sizes()[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn forward(&self, inputs: Array2<f64>) -> (DenseTape, Vec<Rgb>) {
        let n = inputs.nrows();
        let tape = self.net.forward(inputs, n);
        let out = tape.output();
        let colors = (0..n)
            .map(|i| [sigmoid(out[[i, 0]]), sigmoid(out[[i, 1]]), sigmoid(out[[i, 2]])])
            .collect();
        (tape, colors)
    }

    /// Backward from color gradients; adds parameter gradients into `grads`
    /// and returns the gradient with respect to the inputs.
    pub fn backward(&self, tape: &DenseTape, colors: &[Rgb], g_colors: &[Rgb], grads: &mut [f64]) -> Array2<f64> {
        let n = colors.len();
        let g = Array2::from_shape_fn((n, 3), |(i, k)| g_colors[i][k] * colors[i][k] * (1.0 - colors[i][k]));
        self.net.backward(tape, g, grads)
    }
}
