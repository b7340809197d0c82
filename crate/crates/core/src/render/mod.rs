//! Discretized volume rendering of the field with a small radiance head, and
//! exact reverse-mode gradients of the photometric and Eikonal losses.

mod head;
mod pipeline;

pub use head::RadianceHead;
pub use pipeline::{proposal_points, 
    forward_backward, propose, ray_intervals, render_rays, train_batch, Diagnostics, Guidance,
    RenderOutput, StepOutput,
};

use crate::field::{FieldMode, MlpConfig, MlpField};
use crate::geometry::IntervalSet;
use crate::sampler::SamplerConfig;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Rgb = [f64; 3];

/// Input width of a radiance head for a field with `features` feature outputs.
pub fn head_input_dim(features: usize) -> usize {
    head::GEOMETRY_INPUTS + features
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub background: Rgb,
    pub eikonal_weight: f64,
    /// Samples with `|f − h|` below this count as near the surface.
    pub near_surface_threshold: f64,
    pub chunk_rays: usize,
    pub sampler: SamplerConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [1.0, 1.0, 1.0],
            eikonal_weight: 0.1,
            near_surface_threshold: 0.04,
            chunk_rays: 32,
            sampler: SamplerConfig::for_samples(32),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config(format!("{path}.background"), "components must lie in [0, 1]"));
        }
        if !(self.eikonal_weight >= 0.0) {
            return Err(Error::config(format!("{path}.eikonal_weight"), "must be non-negative"));
        }
        if !(self.near_surface_threshold > 0.0) {
            return Err(Error::config(format!("{path}.near_surface_threshold"), "must be positive"));
        }
        if self.chunk_rays == 0 {
            return Err(Error::config(format!("{path}.chunk_rays"), "must be positive"));
        }
        self.sampler.validate(&format!("{path}.sampler"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

/// Field, radiance head and the logistic sharpness `s = exp(log_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub field: MlpField,
    pub head: RadianceHead,
    pub log_s: f64,
}

/// Initial logistic sharpness.
pub const INIT_SHARPNESS: f64 = 20.0;

impl Model {
    pub fn new<R: Rng + ?Sized>(mlp: MlpConfig, mode: FieldMode, head: &HeadConfig, rng: &mut R) -> Self {
        let field = MlpField::new(mlp, mode, rng);
        let head = RadianceHead::new(mlp.features, &head.hidden, rng);
        Self {
            field,
            head,
            log_s: INIT_SHARPNESS.ln(),
        }
    }

    pub fn sharpness(&self) -> f64 {
        self.log_s.exp()
    }

    pub fn n_params(&self) -> usize {
        self.field.n_params() + self.head.n_params() + 1
    }

    /// Parameters in the order `[field | head | log_s]`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(self.field.params());
        v.extend_from_slice(self.head.params());
        v.push(self.log_s);
        v
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let nf = self.field.n_params();
        let nh = self.head.n_params();
        self.field.params_mut().copy_from_slice(&p[..nf]);
        self.head.params_mut().copy_from_slice(&p[nf..nf + nh]);
        self.log_s = p[nf + nh];
    }
}

/// Per-ray record of one rendering: sample parameters, section opacities,
/// transmittances, weights and radiances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySampleBatch {
    pub ts: Vec<f64>,
    pub alphas: Vec<f64>,
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
    pub colors: Vec<Rgb>,
    pub masked: Vec<bool>,
    pub background: Rgb,
    pub color: Rgb,
    pub acc: f64,
}

impl RaySampleBatch {
    pub fn midpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.ts.windows(2).map(|w| 0.5 * (w[0] + w[1]))
    }

    /// Recompute transmittances, weights and color from the current alphas.
    pub fn recomposite(&mut self) {
        let (color, weights, trans) = composite(&self.alphas, &self.colors, self.background);
        self.color = color;
        self.acc = weights.iter().sum();
        self.weights = weights;
        self.trans = trans;
    }
}

/// Section opacities `clamp((Φ(f_i) − Φ(f_{i+1}))/Φ(f_i), 0, 1)` with `Φ` the
/// logistic CDF of sharpness `s`.
pub fn alphas_from_field(f: &[f64], s: f64) -> Vec<f64> {
    f.windows(2)
        .map(|w| {
            let p0 = logistic(s * w[0]);
            let p1 = logistic(s * w[1]);
            if p0 > 0.0 {
                ((p0 - p1) / p0).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn logistic(x: f64) -> f64 {
    crate::field::mlp::sigmoid(x)
}

/// Front-to-back compositing. Returns the color, the weights `T_i α_i`, and
/// the transmittances `T_i`.
pub fn composite(alphas: &[f64], colors: &[Rgb], background: Rgb) -> (Rgb, Vec<f64>, Vec<f64>) {
    assert_eq!(alphas.len(), colors.len());
    let mut t = 1.0;
    let mut out = [0.0; 3];
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = Vec::with_capacity(alphas.len());
    for (a, c) in alphas.iter().zip(colors) {
        let w = t * a;
        trans.push(t);
        weights.push(w);
        for k in 0..3 {
            out[k] += w * c[k];
        }
        t *= 1.0 - a;
    }
    let acc: f64 = weights.iter().sum();
    for k in 0..3 {
        out[k] += (1.0 - acc) * background[k];
    }
    (out, weights, trans)
}

/// Zero the opacity of every section whose midpoint lies outside `intervals`
/// and recomposite; equivalent to rendering only the inside sections.
pub fn mask_weights(batch: &mut RaySampleBatch, intervals: &IntervalSet) {
    let mids: Vec<f64> = batch.midpoints().collect();
    batch.masked = mids.iter().map(|&m| !intervals.contains(m)).collect();
    for (a, &m) in batch.alphas.iter_mut().zip(&batch.masked) {
        if m {
            *a = 0.0;
        }
    }
    batch.recomposite();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{interval_union, Interval};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_space_is_transparent() {
        let a = alphas_from_field(&[0.5; 10], 64.0);
        assert!(a.iter().all(|&x| x < 1e-6));
    }

    #[test]
    fn sharp_crossing_is_opaque() {
        let a = alphas_from_field(&[0.3, -0.3], 1e4);
        assert!((a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_matches_density_quadrature() {
        // Along a section where f is linear in t, the induced density is
        // ρ(t) = max(−(dΦ/dt)/Φ, 0) and α = 1 − exp(−∫ρ).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let f0: f64 = rng.random_range(-0.5..0.5);
            let f1: f64 = rng.random_range(-0.5..0.5);
            let s: f64 = rng.random_range(5.0..100.0);
            let alpha = alphas_from_field(&[f0, f1], s)[0];
            let n = 1000;
            let mut integral = 0.0;
            for j in 0..n {
                let u = (j as f64 + 0.5) / n as f64;
                let f = f0 + (f1 - f0) * u;
                let phi = logistic(s * f);
                let dphi = s * phi * (1.0 - phi) * (f1 - f0);
                integral += (-dphi / phi).max(0.0) / n as f64;
            }
            let oracle = 1.0 - (-integral).exp();
            assert!((alpha - oracle).abs() < 1e-3, "{alpha} {oracle}");
        }
    }

    #[test]
    fn composite_basic_cases() {
        let (c, w, _) = composite(&[1.0], &[[1.0, 0.0, 0.0]], [1.0, 1.0, 1.0]);
        assert_eq!(c, [1.0, 0.0, 0.0]);
        assert_eq!(w, vec![1.0]);
        let (c, _, _) = composite(&[0.0, 0.0], &[[0.2; 3], [0.3; 3]], [0.1, 0.5, 0.9]);
        assert_eq!(c, [0.1, 0.5, 0.9]);
    }

    #[test]
    fn composite_matches_back_to_front_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let alphas: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let colors: Vec<Rgb> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let bg = [rng.random(), rng.random(), rng.random()];
            let (c, w, trans) = composite(&alphas, &colors, bg);
            let mut r = bg;
            for i in (0..n).rev() {
                for k in 0..3 {
                    r[k] = alphas[i] * colors[i][k] + (1.0 - alphas[i]) * r[k];
                }
            }
            for k in 0..3 {
                assert!((c[k] - r[k]).abs() < 1e-12);
            }
            assert!(w.iter().sum::<f64>() <= 1.0 + 1e-9);
            assert_eq!(trans[0], 1.0);
            for i in 1..n {
                assert!((trans[i] - trans[i - 1] * (1.0 - alphas[i - 1])).abs() < 1e-15);
            }
        }
    }

    fn batch_with(ts: Vec<f64>, alphas: Vec<f64>, colors: Vec<Rgb>) -> RaySampleBatch {
        let mut b = RaySampleBatch {
            ts,
            alphas,
            colors,
            background: [1.0, 1.0, 1.0],
            ..Default::default()
        };
        b.recomposite();
        b
    }

    #[test]
    fn masking_cases() {
        let ts = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let alphas = vec![0.3, 0.5, 0.2, 0.9];
        let colors = vec![[0.1, 0.2, 0.3], [0.9, 0.1, 0.1], [0.2, 0.8, 0.2], [0.4, 0.4, 0.9]];
        let full = interval_union([Interval::new(-1.0, 3.0).unwrap()]);
        let mut b = batch_with(ts.clone(), alphas.clone(), colors.clone());
        let before = b.clone();
        mask_weights(&mut b, &full);
        assert_eq!(b.color, before.color);

        let mut b = batch_with(ts.clone(), alphas.clone(), colors.clone());
        mask_weights(&mut b, &interval_union([Interval::new(5.0, 6.0).unwrap()]));
        assert_eq!(b.color, [1.0, 1.0, 1.0]);
        assert_eq!(b.acc, 0.0);

        // Sections with midpoints 0.25 and 1.25 inside; compare to rendering only those.
        let iv = interval_union([Interval::new(0.0, 0.4).unwrap(), Interval::new(1.1, 1.4).unwrap()]);
        let mut b = batch_with(ts, alphas.clone(), colors.clone());
        mask_weights(&mut b, &iv);
        let (c, _, _) = composite(&[alphas[0], alphas[2]], &[colors[0], colors[2]], [1.0, 1.0, 1.0]);
        for k in 0..3 {
            assert!((b.color[k] - c[k]).abs() < 1e-15);
        }
    }
}
