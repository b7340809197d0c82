use super::head::GEOMETRY_INPUTS;
use super::{alphas_from_field, composite, logistic, Model, RaySampleBatch, RenderConfig, Rgb};
use crate::field::dense::add_into as dense_add;
use crate::field::{FieldMode, ImplicitSurface};
use crate::geometry::{cloud_intervals, IntervalSet, Ray, SphereIndex, Vec3};
use crate::rng::{item_stream, substream};
use crate::sampler::{propose_batch, ProposalSet, SamplerConfig};
use crate::sphere_cloud::SphereCloud;
use crate::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;

/// A sphere cloud snapshot with its index, restricting where samples go.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub cloud: &'a SphereCloud,
    pub index: &'a SphereIndex,
}

/// Per-ray interval sets: the cloud cover when guided, the whole ray span otherwise.
pub fn ray_intervals(rays: &[Ray], guidance: Option<Guidance<'_>>) -> Result<Vec<IntervalSet>> {
    match guidance {
        None => Ok(rays.iter().map(|r| IntervalSet::single(r.span())).collect()),
        Some(g) => {
            g.index.check(g.cloud)?;
            rays.par_iter().map(|r| cloud_intervals(r, g.cloud, g.index)).collect()
        }
    }
}

/// Proposals for every ray; ray `ids[i]` draws from substream
/// `(iteration, ids[i])` of `seed`, so results do not depend on chunking.
pub fn propose(
    f: &dyn ImplicitSurface,
    rays: &[Ray],
    ids: &[u64],
    intervals: &[IntervalSet],
    cfg: &SamplerConfig,
    chunk: usize,
    seed: u64,
    iteration: u64,
) -> Vec<ProposalSet> {
    let n = rays.len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(chunk.max(1)).map(|s| (s, (s + chunk).min(n))).collect();
    chunks
        .into_par_iter()
        .map(|(a, b)| {
            let mut rngs: Vec<_> = ids[a..b].iter().map(|&id| substream(seed, item_stream(iteration, id))).collect();
            propose_batch(&ids[a..b], &rays[a..b], &intervals[a..b], f, cfg, &mut rngs)
        })
        .flat_map_iter(|v| v.into_iter())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub samples_per_ray: Vec<usize>,
    pub near_surface: usize,
    pub total_samples: usize,
}

impl Diagnostics {
    pub fn near_surface_fraction(&self) -> f64 {
        if self.total_samples == 0 {
            0.0
        } else {
            self.near_surface as f64 / self.total_samples as f64
        }
    }

    pub fn mean_samples_per_ray(&self) -> f64 {
        if self.samples_per_ray.is_empty() {
            0.0
        } else {
            self.total_samples as f64 / self.samples_per_ray.len() as f64
        }
    }

    fn merge(&mut self, other: Diagnostics) {
        self.samples_per_ray.extend(other.samples_per_ray);
        self.near_surface += other.near_surface;
        self.total_samples += other.total_samples;
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub colors: Vec<Rgb>,
    pub samples: Vec<RaySampleBatch>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `l1 + eikonal_weight · eikonal`.
    pub loss: f64,
    pub l1: f64,
    pub eikonal: f64,
    pub grads: Vec<f64>,
    pub colors: Vec<Rgb>,
    pub diagnostics: Diagnostics,
}

/// Loss normalizers for a whole batch, so that chunks can be reduced by plain summation.
#[derive(Debug, Clone, Copy)]
struct Norms {
    rays: usize,
    sections: usize,
}

struct ChunkResult {
    l1: f64,
    eikonal: f64,
    grads: Vec<f64>,
    colors: Vec<Rgb>,
    samples: Vec<RaySampleBatch>,
    diagnostics: Diagnostics,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward (and optionally backward) pass over a chunk of rays with fixed proposals.
#[allow(clippy::too_many_arguments)]
fn chunk_pass(
    model: &Model,
    rays: &[Ray],
    intervals: &[IntervalSet],
    sets: &[ProposalSet],
    targets: Option<&[Rgb]>,
    cfg: &RenderConfig,
    norms: Norms,
    keep_samples: bool,
) -> ChunkResult {
    let field = &model.field;
    let h_raw = 0.0;
    let s = model.sharpness();
    let n_feat = field.config().features;

    // Sample points and section midpoints, flattened across the chunk.
    let mut pt_off = Vec::with_capacity(rays.len() + 1);
    let mut mid_off = Vec::with_capacity(rays.len() + 1);
    let mut pts = Vec::new();
    let mut mids = Vec::new();
    let mut mid_dirs = Vec::new();
    for (ray, set) in rays.iter().zip(sets) {
        pt_off.push(pts.len());
        mid_off.push(mids.len());
        pts.extend(set.ts.iter().map(|&t| ray.at(t)));
        for w in set.ts.windows(2) {
            mids.push(ray.at(0.5 * (w[0] + w[1])));
            mid_dirs.push(ray.direction());
        }
    }
    pt_off.push(pts.len());
    mid_off.push(mids.len());

    let mut grads = if targets.is_some() { vec![0.0; model.n_params()] } else { Vec::new() };
    let mut diagnostics = Diagnostics {
        samples_per_ray: sets.iter().map(|s| s.len()).collect(),
        near_surface: 0,
        total_samples: pts.len(),
    };
    let bg = cfg.background;
    if mids.is_empty() {
        // Every ray is empty or has a single sample: all render the background.
        if !pts.is_empty() {
            let v = field.raw_values(&pts);
            diagnostics.near_surface = v.iter().filter(|x| (*x - h_raw).abs() < cfg.near_surface_threshold).count();
        }
        let mut l1 = 0.0;
        if let Some(t) = targets {
            for tg in t {
                for k in 0..3 {
                    l1 += (bg[k] - tg[k]).abs() / (3.0 * norms.rays as f64);
                }
            }
        }
        let samples = if keep_samples {
            sets.iter()
                .map(|set| RaySampleBatch { ts: set.ts.clone(), background: bg, color: bg, ..Default::default() })
                .collect()
        } else {
            Vec::new()
        };
        return ChunkResult { l1, eikonal: 0.0, grads, colors: vec![bg; rays.len()], samples, diagnostics };
    }

    let pt_tape = field.forward(&pts, false);
    let fvals: Vec<f64> = (0..pts.len()).map(|i| pt_tape.sdf(i)).collect();
    diagnostics.near_surface = fvals.iter().filter(|x| (*x - h_raw).abs() < cfg.near_surface_threshold).count();

    let mid_tape = field.forward(&mids, true);
    let nm = mids.len();
    let mut head_in = Array2::<f64>::zeros((nm, GEOMETRY_INPUTS + n_feat));
    for i in 0..nm {
        let g = mid_tape.sdf_grad(i);
        for a in 0..3 {
            head_in[[i, a]] = mids[i][a];
            head_in[[i, 3 + a]] = mid_dirs[i][a];
            head_in[[i, 6 + a]] = g[a];
        }
        let feats = mid_tape.features(i);
        for k in 0..n_feat {
            head_in[[i, GEOMETRY_INPUTS + k]] = feats[k];
        }
    }
    let (head_tape, mid_colors) = model.head.forward(head_in);

    let mut colors = Vec::with_capacity(rays.len());
    let mut samples = Vec::new();
    let mut l1 = 0.0;
    let mut eik = 0.0;

    // Upstream buffers, filled only when gradients are requested.
    let want_grad = targets.is_some();
    let mut up_pt = if want_grad { pt_tape.zero_upstream() } else { Array2::zeros((0, 0)) };
    let mut up_mid = if want_grad { mid_tape.zero_upstream() } else { Array2::zeros((0, 0)) };
    let mut g_colors: Vec<Rgb> = if want_grad { vec![[0.0; 3]; nm] } else { Vec::new() };
    let mut g_log_s = 0.0;

    for r in 0..rays.len() {
        let (p0, p1) = (pt_off[r], pt_off[r + 1]);
        let (m0, m1) = (mid_off[r], mid_off[r + 1]);
        let f_ray = &fvals[p0..p1];
        let raw_alphas: Vec<f64> = match field.mode() {
            FieldMode::Sdf => alphas_from_field(f_ray, s),
            FieldMode::Occupancy { scale } => (m0..m1).map(|i| logistic(-mid_tape.sdf(i) / scale)).collect(),
        };
        let masked: Vec<bool> = sets[r]
            .ts
            .windows(2)
            .map(|w| !intervals[r].contains(0.5 * (w[0] + w[1])))
            .collect();
        let alphas: Vec<f64> = raw_alphas.iter().zip(&masked).map(|(a, &m)| if m { 0.0 } else { *a }).collect();
        let ray_colors = &mid_colors[m0..m1];
        let (color, weights, trans) = composite(&alphas, ray_colors, bg);
        colors.push(color);

        if let Some(t) = targets {
            let tg = t[r];
            let scale = 1.0 / (3.0 * norms.rays as f64);
            let mut g_hat = [0.0; 3];
            for k in 0..3 {
                l1 += (color[k] - tg[k]).abs() * scale;
                g_hat[k] = sign(color[k] - tg[k]) * scale;
            }
            // Suffix colors R_i: what the ray sees behind section i.
            let n = alphas.len();
            let mut rest = vec![[0.0; 3]; n];
            let mut acc = bg;
            for i in (0..n).rev() {
                rest[i] = acc;
                for k in 0..3 {
                    acc[k] = alphas[i] * ray_colors[i][k] + (1.0 - alphas[i]) * acc[k];
                }
            }
            for i in 0..n {
                for k in 0..3 {
                    g_colors[m0 + i][k] = weights[i] * g_hat[k];
                }
                if masked[i] {
                    continue;
                }
                let g_alpha: f64 = (0..3).map(|k| trans[i] * (ray_colors[i][k] - rest[i][k]) * g_hat[k]).sum();
                if g_alpha == 0.0 {
                    continue;
                }
                match field.mode() {
                    FieldMode::Sdf => {
                        let (fa, fb) = (f_ray[i], f_ray[i + 1]);
                        let pa = logistic(s * fa);
                        let pb = logistic(s * fb);
                        if !(pa > 0.0) {
                            continue;
                        }
                        let raw = (pa - pb) / pa;
                        if !(raw > 0.0 && raw < 1.0) {
                            continue;
                        }
                        let ratio = pb / pa;
                        let da_dfa = s * ratio * (1.0 - pa);
                        let da_dfb = -s * ratio * (1.0 - pb);
                        up_pt[[p0 + i, 0]] += g_alpha * da_dfa;
                        up_pt[[p0 + i + 1, 0]] += g_alpha * da_dfb;
                        g_log_s += g_alpha * (da_dfa * fa + da_dfb * fb);
                    }
                    FieldMode::Occupancy { scale } => {
                        let a = raw_alphas[i];
                        up_mid[[m0 + i, 0]] += g_alpha * (-a * (1.0 - a) / scale);
                    }
                }
            }
        }
        if keep_samples {
            samples.push(RaySampleBatch {
                ts: sets[r].ts.clone(),
                acc: weights.iter().sum(),
                alphas,
                trans,
                weights,
                colors: ray_colors.to_vec(),
                masked,
                background: bg,
                color,
            });
        }
    }

    // Eikonal term over all section midpoints of the batch.
    let w_eik = cfg.eikonal_weight;
    for i in 0..nm {
        let g = mid_tape.sdf_grad(i);
        let norm = g.norm();
        eik += (norm - 1.0).powi(2) / norms.sections as f64;
        if want_grad && w_eik > 0.0 && norm > 0.0 {
            let c = w_eik * 2.0 * (norm - 1.0) / norm / norms.sections as f64;
            for a in 0..3 {
                up_mid[[(a + 1) * nm + i, 0]] += c * g[a];
            }
        }
    }

    if want_grad {
        let nf = field.n_params();
        let nh = model.head.n_params();
        let (gf, rest) = grads.split_at_mut(nf);
        let (gh, gs) = rest.split_at_mut(nh);
        let g_in = model.head.backward(&head_tape, &mid_colors, &g_colors, gh);
        for i in 0..nm {
            for a in 0..3 {
                up_mid[[(a + 1) * nm + i, 0]] += g_in[[i, 6 + a]];
            }
            for k in 0..n_feat {
                up_mid[[i, 1 + k]] += g_in[[i, GEOMETRY_INPUTS + k]];
            }
        }
        field.backward(&mid_tape, up_mid, gf).expect("upstream shaped from tape");
        field.backward(&pt_tape, up_pt, gf).expect("upstream shaped from tape");
        gs[0] = g_log_s;
    }

    ChunkResult { l1, eikonal: eik, grads, colors, samples, diagnostics }
}

fn run_chunks(
    model: &Model,
    rays: &[Ray],
    intervals: &[IntervalSet],
    sets: &[ProposalSet],
    targets: Option<&[Rgb]>,
    cfg: &RenderConfig,
    keep_samples: bool,
) -> Vec<ChunkResult> {
    let n = rays.len();
    let norms = Norms {
        rays: n.max(1),
        sections: sets.iter().map(|s| s.len().saturating_sub(1)).sum::<usize>().max(1),
    };
    let chunk = cfg.chunk_rays.max(1);
    let bounds: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    bounds
        .into_par_iter()
        .map(|(a, b)| {
            chunk_pass(
                model,
                &rays[a..b],
                &intervals[a..b],
                &sets[a..b],
                targets.map(|t| &t[a..b]),
                cfg,
                norms,
                keep_samples,
            )
        })
        .collect()
}

/// Loss and exact parameter gradient for fixed proposals. Chunk results are
/// reduced in chunk order, so the output does not depend on the thread count.
pub fn forward_backward(
    model: &Model,
    rays: &[Ray],
    intervals: &[IntervalSet],
    sets: &[ProposalSet],
    targets: &[Rgb],
    cfg: &RenderConfig,
) -> Result<StepOutput> {
    if targets.len() != rays.len() || sets.len() != rays.len() || intervals.len() != rays.len() {
        return Err(Error::ShapeMismatch { expected: rays.len(), actual: targets.len() });
    }
    let results = run_chunks(model, rays, intervals, sets, Some(targets), cfg, false);
    let mut out = StepOutput {
        loss: 0.0,
        l1: 0.0,
        eikonal: 0.0,
        grads: vec![0.0; model.n_params()],
        colors: Vec::with_capacity(rays.len()),
        diagnostics: Diagnostics::default(),
    };
    for r in results {
        out.l1 += r.l1;
        out.eikonal += r.eikonal;
        dense_add(&mut out.grads, &r.grads);
        out.colors.extend(r.colors);
        out.diagnostics.merge(r.diagnostics);
    }
    out.loss = out.l1 + cfg.eikonal_weight * out.eikonal;
    Ok(out)
}

/// Full training pass over one ray batch: intervals, proposals, loss, gradient.
#[allow(clippy::too_many_arguments)]
pub fn train_batch(
    model: &Model,
    rays: &[Ray],
    ids: &[u64],
    targets: &[Rgb],
    guidance: Option<Guidance<'_>>,
    cfg: &RenderConfig,
    seed: u64,
    iteration: u64,
) -> Result<StepOutput> {
    let intervals = ray_intervals(rays, guidance)?;
    let sets = propose(&model.field, rays, ids, &intervals, &cfg.sampler, cfg.chunk_rays, seed, iteration);
    forward_backward(model, rays, &intervals, &sets, targets, cfg)
}

/// Forward rendering of a ray batch.
pub fn render_rays(
    model: &Model,
    rays: &[Ray],
    ids: &[u64],
    guidance: Option<Guidance<'_>>,
    cfg: &RenderConfig,
    seed: u64,
    iteration: u64,
) -> Result<RenderOutput> {
    let intervals = ray_intervals(rays, guidance)?;
    let sets = propose(&model.field, rays, ids, &intervals, &cfg.sampler, cfg.chunk_rays, seed, iteration);
    let results = run_chunks(model, rays, &intervals, &sets, None, cfg, true);
    let mut out = RenderOutput {
        colors: Vec::with_capacity(rays.len()),
        samples: Vec::with_capacity(rays.len()),
        diagnostics: Diagnostics::default(),
    };
    for r in results {
        out.colors.extend(r.colors);
        out.samples.extend(r.samples);
        out.diagnostics.merge(r.diagnostics);
    }
    Ok(out)
}

/// Positions of all proposals, for containment checks.
pub fn proposal_points(rays: &[Ray], sets: &[ProposalSet]) -> Vec<Vec3> {
    rays.iter().zip(sets).flat_map(|(r, s)| s.ts.iter().map(move |&t| r.at(t))).collect()
}
