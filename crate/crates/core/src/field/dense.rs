//! Fully connected layers with forward-mode input tangents and exact reverse
//! mode through both values and tangents.
//!
//! A batch of `n` points is stored as a stacked matrix: rows `0..n` hold
//! values and each further block of `n` rows holds the derivative of those
//! values with respect to one input coordinate. Linear maps act identically on
//! every block (biases only touch the value block) and activations apply the
//! chain rule `da = σ'(z)·dz` to the tangent blocks.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Softplus { beta: f64 },
    Relu,
}

impl Activation {
    /// (σ(z), σ'(z), σ''(z))
    #[inline]
    fn eval(&self, z: f64) -> (f64, f64, f64) {
        match *self {
            Activation::Softplus { beta } => {
                let bz = beta * z;
                let v = if bz > 30.0 { z } else { bz.exp().ln_1p() / beta };
                let s = if bz >= 0.0 {
                    1.0 / (1.0 + (-bz).exp())
                } else {
                    let e = bz.exp();
                    e / (1.0 + e)
                };
                (v, s, beta * s * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    sizes: Vec<usize>,
    act: Activation,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct DenseTape {
    n: usize,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl DenseTape {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.output.nrows()
    }

    /// All stacked output rows.
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.output.slice(s![0..self.n, ..])
    }
}

impl Dense {
    /// Layer sizes including input and output widths; parameters zeroed.
    pub fn new(sizes: &[usize], act: Activation) -> Self {
        assert!(sizes.len() >= 2);
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for w in sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        offsets.push(off);
        Self {
            sizes: sizes.to_vec(),
            act,
            offsets,
            params: vec![0.0; off],
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.act
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Index ranges of layer `l`'s weight matrix (row-major, out × in) and bias.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.offsets[l]..self.offsets[l] + i * o;
        (w.clone(), w.end..w.end + o)
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, _) = self.layer_ranges(l);
        ArrayView2::from_shape((self.sizes[l + 1], self.sizes[l]), &self.params[w]).unwrap()
    }

    /// Default initialization: weights `N(0, 1/fan_in)`, zero biases.
    pub fn init_default<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for l in 0..self.n_layers() {
            let (w, _) = self.layer_ranges(l);
            let normal = Normal::new(0.0, (1.0 / self.sizes[l] as f64).sqrt()).unwrap();
            for p in &mut self.params[w] {
                *p = normal.sample(rng);
            }
        }
    }

    /// Forward pass on a stacked input whose first `n` rows are values.
    pub fn forward(&self, input: Array2<f64>, n: usize) -> DenseTape {
        let rows = input.nrows();
        assert!(n > 0 && rows % n == 0, "stacked rows must be a multiple of n");
        let blocks = rows / n;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers() - 1);
        let mut a = input;
        for l in 0..self.n_layers() {
            let mut z = a.dot(&self.weight(l).t());
            let (_, b) = self.layer_ranges(l);
            let bias = ndarray::ArrayView1::from(&self.params[b]);
            z.slice_mut(s![0..n, ..]).axis_iter_mut(Axis(0)).for_each(|mut row| row += &bias);
            inputs.push(a);
            if l + 1 == self.n_layers() {
                return DenseTape { n, inputs, pre, output: z };
            }
            let mut next = Array2::<f64>::zeros(z.raw_dim());
            let width = z.ncols();
            for i in 0..n {
                for c in 0..width {
                    let (v, d1, _) = self.act.eval(z[[i, c]]);
                    next[[i, c]] = v;
                    for b in 1..blocks {
                        next[[b * n + i, c]] = d1 * z[[b * n + i, c]];
                    }
                }
            }
            pre.push(z);
            a = next;
        }
        unreachable!()
    }

    /// Reverse pass. `g_out` has the same stacked shape as the output.
    /// Parameter gradients are added into `grads`; the gradient with respect
    /// to the stacked input is returned.
    pub fn backward(&self, tape: &DenseTape, g_out: Array2<f64>, grads: &mut [f64]) -> Array2<f64> {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(g_out.dim(), tape.output.dim());
        let n = tape.n;
        let blocks = tape.output.nrows() / n;
        let mut g = g_out;
        for l in (0..self.n_layers()).rev() {
            let (wr, br) = self.layer_ranges(l);
            let gw = g.t().dot(&tape.inputs[l]);
            for (dst, src) in grads[wr].iter_mut().zip(gw.iter()) {
                *dst += *src;
            }
            let gb = g.slice(s![0..n, ..]).sum_axis(Axis(0));
            for (dst, src) in grads[br].iter_mut().zip(gb.iter()) {
                *dst += *src;
            }
            let ga = g.dot(&self.weight(l));
            if l == 0 {
                return ga;
            }
            let z = &tape.pre[l - 1];
            let mut gz = Array2::<f64>::zeros(z.raw_dim());
            let width = z.ncols();
            for i in 0..n {
                for c in 0..width {
                    let (_, d1, d2) = self.act.eval(z[[i, c]]);
                    let mut acc = d1 * ga[[i, c]];
                    for b in 1..blocks {
                        let r = b * n + i;
                        acc += d2 * z[[r, c]] * ga[[r, c]];
                        gz[[r, c]] = d1 * ga[[r, c]];
                    }
                    gz[[i, c]] = acc;
                }
            }
            g = gz;
        }
        unreachable!()
    }
}

/// `a += b` elementwise, for reducing per-chunk gradients in a fixed order.
pub fn add_into(a: &mut [f64], b: &[f64]) {
    Zip::from(ndarray::ArrayViewMut1::from(a))
        .and(ndarray::ArrayView1::from(b))
        .for_each(|x, y| *x += *y);
}
