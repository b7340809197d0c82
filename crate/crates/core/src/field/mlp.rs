//! The trainable field: positional encoding followed by a softplus MLP whose
//! first output is the signed distance and the rest are features for the
//! radiance head.

use super::dense::{Activation, Dense, DenseTape};
use super::ImplicitSurface;
use crate::checkpoint::{write_atomic, Decoder, Encoder};
use crate::geometry::Vec3;
use crate::{Error, Result};
use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldMode {
    Sdf,
    /// Occupancy `sigmoid(-f / scale)` over the same network, surface at 0.5.
    Occupancy { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub frequencies: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub features: usize,
    pub softplus_beta: f64,
    pub geometric_init: bool,
    pub init_radius: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            frequencies: 6,
            hidden_layers: 4,
            hidden_width: 64,
            features: 16,
            softplus_beta: 100.0,
            geometric_init: true,
            init_radius: 0.5,
        }
    }
}

impl MlpConfig {
    pub fn encoded_dim(&self) -> usize {
        3 + 6 * self.frequencies
    }

    pub fn output_dim(&self) -> usize {
        1 + self.features
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::config(format!("{path}.hidden_layers"), "network needs at least one hidden layer of nonzero width"));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(Error::config(format!("{path}.softplus_beta"), "must be positive"));
        }
        if !(self.init_radius > 0.0 && self.init_radius < 1.0) {
            return Err(Error::config(format!("{path}.init_radius"), "must lie in (0, 1)"));
        }
        if self.frequencies > 20 {
            return Err(Error::config(format!("{path}.frequencies"), "at most 20"));
        }
        Ok(())
    }
}

/// Stacked encoding of `xs`: `[x, sin(2^k x), cos(2^k x)]` per point, plus
/// three tangent blocks when `tangents` is set.
pub fn encode(xs: &[Vec3], frequencies: usize, tangents: bool) -> Array2<f64> {
    let n = xs.len();
    let dim = 3 + 6 * frequencies;
    let blocks = if tangents { 4 } else { 1 };
    let mut out = Array2::<f64>::zeros((blocks * n, dim));
    for (i, x) in xs.iter().enumerate() {
        for a in 0..3 {
            out[[i, a]] = x[a];
            if tangents {
                out[[(a + 1) * n + i, a]] = 1.0;
            }
        }
        for k in 0..frequencies {
            let w = (1u64 << k) as f64;
            for a in 0..3 {
                let (sn, cs) = (w * x[a]).sin_cos();
                let cs_col = 3 + 6 * k + 3 + a;
                let sn_col = 3 + 6 * k + a;
                out[[i, sn_col]] = sn;
                out[[i, cs_col]] = cs;
                if tangents {
                    out[[(a + 1) * n + i, sn_col]] = w * cs;
                    out[[(a + 1) * n + i, cs_col]] = -w * sn;
                }
            }
        }
    }
    out
}

/// Gradient with respect to the points of a scalar whose gradient with respect
/// to the value block of the encoding is `g`.
fn encode_backward(xs: &[Vec3], frequencies: usize, g: &Array2<f64>) -> Vec<Vec3> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut out = Vec3::new(g[[i, 0]], g[[i, 1]], g[[i, 2]]);
            for k in 0..frequencies {
                let w = (1u64 << k) as f64;
                for a in 0..3 {
                    let (sn, cs) = (w * x[a]).sin_cos();
                    out[a] += w * cs * g[[i, 3 + 6 * k + a]] - w * sn * g[[i, 3 + 6 * k + 3 + a]];
                }
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    cfg: MlpConfig,
    mode: FieldMode,
    net: Dense,
}

/// Forward cache of [`MlpField::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub(crate) dense: DenseTape,
    tangents: bool,
}

impl MlpTape {
    pub fn n(&self) -> usize {
        self.dense.n()
    }

    pub fn has_tangents(&self) -> bool {
        self.tangents
    }

    /// Raw network output (signed distance before any occupancy mapping).
    pub fn sdf(&self, i: usize) -> f64 {
        self.dense.output()[[i, 0]]
    }

    /// Spatial gradient of the raw output; requires a tangent pass.
    pub fn sdf_grad(&self, i: usize) -> Vec3 {
        assert!(self.tangents, "forward pass ran without tangents");
        let n = self.n();
        let o = self.dense.output();
        Vec3::new(o[[n + i, 0]], o[[2 * n + i, 0]], o[[3 * n + i, 0]])
    }

    pub fn features(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.dense.output().slice(s![i, 1..])
    }

    /// Zeroed upstream-gradient buffer shaped like the stacked output.
    pub fn zero_upstream(&self) -> Array2<f64> {
        Array2::zeros(self.dense.output().raw_dim())
    }
}

const MAGIC: &[u8; 8] = b"SGFIELD\0";
const VERSION: u32 = 1;
const EVAL_CHUNK: usize = 4096;

impl MlpField {
    pub fn new<R: Rng + ?Sized>(cfg: MlpConfig, mode: FieldMode, rng: &mut R) -> Self {
        let mut sizes = vec![cfg.encoded_dim()];
        sizes.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        sizes.push(cfg.output_dim());
        let mut net = Dense::new(&sizes, Activation::Softplus { beta: cfg.softplus_beta });
        if cfg.geometric_init {
            geometric_init(&mut net, &cfg, rng);
        } else {
            net.init_default(rng);
        }
        Self { cfg, mode, net }
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn net(&self) -> &Dense {
        &self.net
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

    pub fn forward(&self, xs: &[Vec3], tangents: bool) -> MlpTape {
        let input = encode(xs, self.cfg.frequencies, tangents);
        MlpTape {
            dense: self.net.forward(input, xs.len()),
            tangents,
        }
    }

    /// Adds `d(Σ upstream·outputs)/dθ` into `grads`.
    pub fn backward(&self, tape: &MlpTape, upstream: Array2<f64>, grads: &mut [f64]) -> Result<()> {
        if grads.len() != self.n_params() {
            return Err(Error::ShapeMismatch { expected: self.n_params(), actual: grads.len() });
        }
        if upstream.dim() != tape.dense.output().dim() {
            return Err(Error::ShapeMismatch { expected: tape.dense.output().len(), actual: upstream.len() });
        }
        self.net.backward(&tape.dense, upstream, grads);
        Ok(())
    }

    /// Adds `d(Σ_j upstream_j · f(x_j))/dθ` for the raw output `f`.
    pub fn backward_params(&self, xs: &[Vec3], upstream: &[f64], grads: &mut [f64]) -> Result<()> {
        if upstream.len() != xs.len() {
            return Err(Error::ShapeMismatch { expected: xs.len(), actual: upstream.len() });
        }
        if xs.is_empty() {
            return Ok(());
        }
        let tape = self.forward(xs, false);
        let mut g = tape.zero_upstream();
        for (j, u) in upstream.iter().enumerate() {
            g[[j, 0]] = *u;
        }
        self.backward(&tape, g, grads)
    }

    /// Raw outputs for many points, chunked to bound memory.
    pub fn raw_values(&self, xs: &[Vec3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(EVAL_CHUNK) {
            let t = self.forward(chunk, false);
            out.extend((0..chunk.len()).map(|i| t.sdf(i)));
        }
        out
    }

    pub fn raw_values_grads(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(EVAL_CHUNK / 4) {
            let t = self.forward(chunk, true);
            out.extend((0..chunk.len()).map(|i| (t.sdf(i), t.sdf_grad(i))));
        }
        out
    }

    /// Input gradient of the raw output by reverse-mode differentiation of
    /// a value-only forward pass.
    pub fn grad_reverse(&self, xs: &[Vec3]) -> Vec<Vec3> {
        if xs.is_empty() {
            return Vec::new();
        }
        let tape = self.forward(xs, false);
        let mut g = tape.zero_upstream();
        g.column_mut(0).fill(1.0);
        let mut scratch = vec![0.0; self.n_params()];
        let ge = self.net.backward(&tape.dense, g, &mut scratch);
        encode_backward(xs, self.cfg.frequencies, &ge)
    }

    fn map_value(&self, f: f64) -> f64 {
        match self.mode {
            FieldMode::Sdf => f,
            FieldMode::Occupancy { scale } => sigmoid(-f / scale),
        }
    }

    fn map_grad(&self, f: f64, g: Vec3) -> Vec3 {
        match self.mode {
            FieldMode::Sdf => g,
            FieldMode::Occupancy { scale } => {
                let o = sigmoid(-f / scale);
                g * (-o * (1.0 - o) / scale)
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.bytes(serde_json::to_string(&(&self.cfg, &self.mode)).unwrap().as_bytes());
        e.f64s(&self.net.params);
        e.finish()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut d = Decoder::new(data, path, MAGIC, VERSION)?;
        let (cfg, mode): (MlpConfig, FieldMode) =
            serde_json::from_slice(d.bytes()?).map_err(|e| d.err(&format!("bad header: {e}")))?;
        let params = d.f64s()?;
        d.finish()?;
        let mut sizes = vec![cfg.encoded_dim()];
        sizes.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        sizes.push(cfg.output_dim());
        let mut net = Dense::new(&sizes, Activation::Softplus { beta: cfg.softplus_beta });
        if params.len() != net.n_params() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected {} parameters, found {}", net.n_params(), params.len()),
            });
        }
        net.params = params;
        Ok(Self { cfg, mode, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Initialization approximating the signed distance of a sphere of radius
/// `cfg.init_radius`: hidden weights `N(0, 2/fan_out)`, encoding columns other
/// than the raw coordinates zeroed, and the distance row of the last layer set
/// near `sqrt(π/fan_in)` with bias `-init_radius`.
fn geometric_init<R: Rng + ?Sized>(net: &mut Dense, cfg: &MlpConfig, rng: &mut R) {
    let sizes = net.sizes().to_vec();
    let last = net.n_layers() - 1;
    for l in 0..=last {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let (wr, br) = net.layer_ranges(l);
        let w = &mut net.params[wr];
        if l == last {
            let mean = (std::f64::consts::PI / fan_in as f64).sqrt();
            let row0 = Normal::new(mean, 1e-4).unwrap();
            let feat = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            for o in 0..fan_out {
                for i in 0..fan_in {
                    w[o * fan_in + i] = if o == 0 { row0.sample(rng) } else { feat.sample(rng) };
                }
            }
            net.params[br.start] = -cfg.init_radius;
        } else {
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).unwrap();
            for o in 0..fan_out {
                for i in 0..fan_in {
                    let v = normal.sample(rng);
                    w[o * fan_in + i] = if l == 0 && i >= 3 { 0.0 } else { v };
                }
            }
        }
    }
}

impl ImplicitSurface for MlpField {
    fn level(&self) -> f64 {
        match self.mode {
            FieldMode::Sdf => 0.0,
            FieldMode::Occupancy { .. } => 0.5,
        }
    }

    fn value(&self, x: &Vec3) -> f64 {
        self.values(std::slice::from_ref(x))[0]
    }

    fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
        self.values_grads(std::slice::from_ref(x))[0]
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        self.raw_values(xs).into_iter().map(|f| self.map_value(f)).collect()
    }

    fn values_grads(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        self.raw_values_grads(xs)
            .into_iter()
            .map(|(f, g)| (self.map_value(f), self.map_grad(f, g)))
            .collect()
    }
}

/// Mean of `(|∇f(x)| − 1)²` over `points` and its parameter gradient (added
/// into `grads`, scaled by `weight`).
pub fn eikonal_loss(field: &MlpField, points: &[Vec3], weight: f64, grads: &mut [f64]) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let tape = field.forward(points, true);
    let mut up = tape.zero_upstream();
    let n = points.len();
    let mut loss = 0.0;
    for i in 0..n {
        let g = tape.sdf_grad(i);
        let norm = g.norm();
        loss += (norm - 1.0).powi(2);
        if norm > 0.0 {
            let scale = weight * 2.0 * (norm - 1.0) / norm / n as f64;
            for a in 0..3 {
                up[[(a + 1) * n + i, 0]] = scale * g[a];
            }
        }
    }
    field.backward(&tape, up, grads)?;
    Ok(loss / n as f64)
}
