//! Proposal generation restricted to an interval set: initial per-segment
//! spacing, importance upsampling that puts no mass in the gaps, and root
//! finding within the covered segments.

use crate::field::ImplicitSurface;
use crate::geometry::{IntervalSet, Ray, Vec3};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// `n_k = max(2, round(n · len_k / Σ len))`.
    Proportional,
    /// `n_k = floor(n / len_k)` clamped to `[2, 4n]`.
    Literal,
}

/// How the final samples are concentrated after the initial proposals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Marching {
    /// Hierarchical inverse-CDF upsampling from logistic section weights.
    Hierarchical,
    /// Root search followed by samples in a band of the given half width
    /// around the first crossing.
    RootBand { half_width: f64, probes_per_unit: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_budget: usize,
    pub upsample_rounds: usize,
    pub upsample_per_round: usize,
    pub allocation: Allocation,
    /// Logistic sharpness of the first upsampling round; doubled every round.
    pub s_sharpness: f64,
    pub jitter: bool,
    pub marching: Marching,
}

impl SamplerConfig {
    /// Half of `samples_per_ray` as initial proposals and the other half over
    /// four upsampling rounds.
    pub fn for_samples(samples_per_ray: usize) -> Self {
        let n_budget = (samples_per_ray / 2).max(2);
        let rest = samples_per_ray.saturating_sub(n_budget);
        let rounds = if rest >= 4 { 4 } else { rest };
        Self {
            n_budget,
            upsample_rounds: rounds,
            upsample_per_round: if rounds > 0 { rest / rounds } else { 0 },
            allocation: Allocation::Proportional,
            s_sharpness: 64.0,
            jitter: true,
            marching: Marching::Hierarchical,
        }
    }

    pub fn max_total(&self) -> usize {
        4 * self.n_budget
    }

    fn upsample_total(&self) -> usize {
        match self.marching {
            Marching::Hierarchical => self.upsample_rounds * self.upsample_per_round,
            Marching::RootBand { .. } => self.upsample_per_round * self.upsample_rounds.max(1),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.n_budget < 2 {
            return Err(Error::config(format!("{path}.n_budget"), "must be at least 2"));
        }
        if self.upsample_total() + 2 > self.max_total() {
            return Err(Error::config(
                format!("{path}.upsample_per_round"),
                "upsampled points leave no room for initial proposals under the 4*n_budget cap",
            ));
        }
        if !(self.s_sharpness > 0.0) {
            return Err(Error::config(format!("{path}.s_sharpness"), "must be positive"));
        }
        if let Marching::RootBand { half_width, probes_per_unit } = self.marching {
            if !(half_width > 0.0) || !(probes_per_unit > 0.0) {
                return Err(Error::config(format!("{path}.marching"), "band width and probe density must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Upsampled,
}

/// Ordered proposals along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub ray_id: u64,
    pub ts: Vec<f64>,
    pub segments: Vec<usize>,
    pub stages: Vec<Stage>,
}

impl ProposalSet {
    pub fn empty(ray_id: u64) -> Self {
        Self {
            ray_id,
            ts: Vec::new(),
            segments: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Merge new `(t, segment)` points, keeping `ts` strictly increasing.
    fn insert(&mut self, new: &[(f64, usize)]) {
        let mut all: Vec<(f64, usize, Stage)> = self
            .ts
            .iter()
            .zip(&self.segments)
            .zip(&self.stages)
            .map(|((&t, &s), &g)| (t, s, g))
            .chain(new.iter().map(|&(t, s)| (t, s, Stage::Upsampled)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        all.dedup_by(|b, a| a.0 == b.0);
        self.ts = all.iter().map(|p| p.0).collect();
        self.segments = all.iter().map(|p| p.1).collect();
        self.stages = all.iter().map(|p| p.2).collect();
    }
}

/// Per-segment counts before the global cap.
fn allocate(intervals: &IntervalSet, cfg: &SamplerConfig) -> Vec<usize> {
    let n = cfg.n_budget;
    let total: f64 = intervals.total_length();
    let mut counts: Vec<usize> = intervals
        .segments()
        .iter()
        .map(|seg| match cfg.allocation {
            Allocation::Proportional => ((n as f64 * seg.len() / total).round() as usize).max(2),
            Allocation::Literal => {
                let raw = (n as f64 / seg.len()).floor();
                (raw.min((4 * n) as f64) as usize).clamp(2, 4 * n)
            }
        })
        .collect();
    let cap = cfg.max_total() - cfg.upsample_total();
    let sum: usize = counts.iter().sum();
    if sum > cap {
        for c in counts.iter_mut() {
            *c = ((*c * cap) / sum).max(2);
        }
        // Minimum counts may still overflow; drop the shortest segments.
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            intervals.segments()[a]
                .len()
                .total_cmp(&intervals.segments()[b].len())
                .then(a.cmp(&b))
        });
        let mut sum: usize = counts.iter().sum();
        for k in order {
            if sum <= cap {
                break;
            }
            sum -= counts[k];
            counts[k] = 0;
        }
    }
    counts
}

/// Evenly spaced points in every segment: endpoints included without jitter,
/// a shared random phase on a lattice of spacing `len/n_k` with jitter.
pub fn initial_proposals(
    ray_id: u64,
    intervals: &IntervalSet,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> ProposalSet {
    let mut set = ProposalSet::empty(ray_id);
    if intervals.is_empty() {
        return set;
    }
    let phase: f64 = if cfg.jitter { rng.random() } else { 0.0 };
    let counts = allocate(intervals, cfg);
    for (k, (seg, &nk)) in intervals.segments().iter().zip(&counts).enumerate() {
        if nk == 0 {
            continue;
        }
        for j in 0..nk {
            let t = if cfg.jitter {
                seg.s() + seg.len() * (j as f64 + phase) / nk as f64
            } else {
                seg.s() + seg.len() * j as f64 / (nk - 1) as f64
            };
            let t = t.clamp(seg.s(), seg.t());
            if set.ts.last().is_some_and(|&last| t <= last) {
                continue;
            }
            set.ts.push(t);
            set.segments.push(k);
            set.stages.push(Stage::Initial);
        }
    }
    set
}

fn logistic(x: f64) -> f64 {
    crate::field::mlp::sigmoid(x)
}

/// Relative floor added to every in-segment section weight so that flat
/// regions still receive samples in proportion to their length.
const WEIGHT_FLOOR: f64 = 1e-5;

/// Section weights for one ray given signed values `d_i = f(p(t_i)) − h`.
/// Sections spanning a gap between segments get exactly zero mass.
pub fn section_weights(set: &ProposalSet, d: &[f64], s: f64) -> Vec<f64> {
    let m = set.ts.len();
    if m < 2 {
        return Vec::new();
    }
    let mut w = vec![0.0; m - 1];
    let mut trans = 1.0;
    let mut prev_cos = 0.0;
    let in_segment: Vec<bool> = (0..m - 1).map(|i| set.segments[i] == set.segments[i + 1]).collect();
    let span: f64 = (0..m - 1)
        .filter(|&i| in_segment[i])
        .map(|i| set.ts[i + 1] - set.ts[i])
        .sum();
    for i in 0..m - 1 {
        if !in_segment[i] {
            prev_cos = 0.0;
            continue;
        }
        let dt = set.ts[i + 1] - set.ts[i];
        let mid = 0.5 * (d[i] + d[i + 1]);
        let cos = ((d[i + 1] - d[i]) / dt).min(prev_cos).clamp(-1e3, 0.0);
        prev_cos = (d[i + 1] - d[i]) / dt;
        let prev_est = mid - cos * dt * 0.5;
        let next_est = mid + cos * dt * 0.5;
        let cp = logistic(prev_est * s);
        let cn = logistic(next_est * s);
        let alpha = if cp > 0.0 { ((cp - cn) / cp).clamp(0.0, 1.0) } else { 0.0 };
        w[i] = trans * alpha + WEIGHT_FLOOR * dt / span.max(1e-300);
        trans *= 1.0 - alpha;
    }
    w
}

/// Stratified inverse-CDF draw of `count` points from piecewise-uniform
/// section weights.
fn draw_from_sections(set: &ProposalSet, w: &[f64], count: usize, phase: f64) -> Vec<(f64, usize)> {
    let total: f64 = w.iter().sum();
    if count == 0 || !(total > 0.0) {
        return Vec::new();
    }
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    for x in w {
        cdf.push(cdf.last().unwrap() + x / total);
    }
    let mut out = Vec::with_capacity(count);
    let mut sec = 0;
    for j in 0..count {
        let u = (j as f64 + phase) / count as f64;
        while sec + 1 < w.len() && (cdf[sec + 1] <= u || w[sec] == 0.0) {
            sec += 1;
        }
        if w[sec] == 0.0 {
            break;
        }
        let frac = ((u - cdf[sec]) / (cdf[sec + 1] - cdf[sec])).clamp(0.0, 1.0);
        let t = set.ts[sec] + frac * (set.ts[sec + 1] - set.ts[sec]);
        out.push((t, set.segments[sec]));
    }
    out
}

/// Hierarchical upsampling for a batch of rays; field values of all new
/// points in a round are evaluated in one batched call.
pub fn upsample_batch(
    sets: &mut [ProposalSet],
    rays: &[Ray],
    f: &dyn ImplicitSurface,
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
) {
    let h = f.level();
    let points: Vec<Vec3> = sets
        .iter()
        .zip(rays)
        .flat_map(|(s, r)| s.ts.iter().map(move |&t| r.at(t)))
        .collect();
    let vals = f.values(&points);
    let mut d: Vec<Vec<f64>> = Vec::with_capacity(sets.len());
    let mut off = 0;
    for s in sets.iter() {
        d.push(vals[off..off + s.len()].iter().map(|v| v - h).collect());
        off += s.len();
    }
    for round in 0..cfg.upsample_rounds {
        let s = cfg.s_sharpness * (1u64 << round) as f64;
        let mut new_pts: Vec<Vec<(f64, usize)>> = Vec::with_capacity(sets.len());
        for (i, set) in sets.iter().enumerate() {
            let phase = if cfg.jitter { rngs[i].random::<f64>() } else { 0.5 };
            let w = section_weights(set, &d[i], s);
            new_pts.push(draw_from_sections(set, &w, cfg.upsample_per_round, phase));
        }
        let batch: Vec<Vec3> = new_pts
            .iter()
            .zip(rays)
            .flat_map(|(p, r)| p.iter().map(move |&(t, _)| r.at(t)))
            .collect();
        if batch.is_empty() {
            break;
        }
        let new_vals = f.values(&batch);
        let mut off = 0;
        for (i, set) in sets.iter_mut().enumerate() {
            let np = &new_pts[i];
            let mut pairs: Vec<(f64, f64)> = set.ts.iter().copied().zip(d[i].iter().copied()).collect();
            pairs.extend(np.iter().zip(&new_vals[off..off + np.len()]).map(|(&(t, _), v)| (t, v - h)));
            off += np.len();
            set.insert(np);
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            pairs.dedup_by(|b, a| a.0 == b.0);
            d[i] = pairs.into_iter().map(|p| p.1).collect();
        }
    }
}

/// Single-ray form of [`upsample_batch`].
pub fn upsample_importance(
    set: &ProposalSet,
    ray: &Ray,
    f: &dyn ImplicitSurface,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> ProposalSet {
    let mut sets = [set.clone()];
    let mut rngs = [rng.clone()];
    upsample_batch(&mut sets, std::slice::from_ref(ray), f, cfg, &mut rngs);
    *rng = rngs[0].clone();
    let [out] = sets;
    out
}

const SECANT_ITERS: usize = 32;
const ROOT_TOL: f64 = 1e-6;

/// First crossing of the level set inside the covered segments: uniform
/// probes per segment, then safeguarded secant refinement.
pub fn find_root_in_intervals(
    ray: &Ray,
    intervals: &IntervalSet,
    f: &dyn ImplicitSurface,
    probes_per_unit: f64,
) -> Option<f64> {
    let h = f.level();
    for seg in intervals.segments() {
        let n = ((seg.len() * probes_per_unit).ceil() as usize).max(2);
        let ts: Vec<f64> = (0..n).map(|j| seg.s() + seg.len() * j as f64 / (n - 1) as f64).collect();
        let pts: Vec<Vec3> = ts.iter().map(|&t| ray.at(t)).collect();
        let vals: Vec<f64> = f.values(&pts).into_iter().map(|v| v - h).collect();
        for j in 0..n - 1 {
            let (fa, fb) = (vals[j], vals[j + 1]);
            if fa == 0.0 {
                return Some(ts[j]);
            }
            if fa.signum() != fb.signum() || fb == 0.0 {
                return Some(refine(ray, f, h, ts[j], ts[j + 1], fa, fb));
            }
        }
    }
    None
}

/// Secant steps kept inside the bracket (Illinois variant of regula falsi).
fn refine(ray: &Ray, f: &dyn ImplicitSurface, h: f64, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64) -> f64 {
    if fb == 0.0 {
        return b;
    }
    let mut side = 0i8;
    let mut t = a;
    for _ in 0..SECANT_ITERS {
        t = (a * fb - b * fa) / (fb - fa);
        if !(t > a && t < b) {
            t = 0.5 * (a + b);
        }
        let ft = f.value(&ray.at(t)) - h;
        if ft.abs() < ROOT_TOL {
            return t;
        }
        if ft.signum() == fa.signum() {
            a = t;
            fa = ft;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = t;
            fb = ft;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
    }
    t
}

/// Band samples around a root, restricted to the segment containing it.
pub fn root_band_samples(
    root: f64,
    intervals: &IntervalSet,
    half_width: f64,
    count: usize,
    phase: f64,
) -> Vec<(f64, usize)> {
    let Some(k) = intervals.segment_of(root) else {
        return Vec::new();
    };
    let seg = intervals.segments()[k];
    let lo = (root - half_width).max(seg.s());
    let hi = (root + half_width).min(seg.t());
    if count == 0 || hi <= lo {
        return Vec::new();
    }
    (0..count)
        .map(|j| (lo + (hi - lo) * (j as f64 + phase) / count as f64, k))
        .collect()
}

/// Full proposal pipeline for a batch of rays: initial proposals inside each
/// ray's interval set, then upsampling or root-band concentration.
pub fn propose_batch(
    ray_ids: &[u64],
    rays: &[Ray],
    intervals: &[IntervalSet],
    f: &dyn ImplicitSurface,
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
) -> Vec<ProposalSet> {
    let mut sets: Vec<ProposalSet> = ray_ids
        .iter()
        .zip(intervals)
        .zip(rngs.iter_mut())
        .map(|((&id, iv), rng)| initial_proposals(id, iv, cfg, rng))
        .collect();
    match cfg.marching {
        Marching::Hierarchical => upsample_batch(&mut sets, rays, f, cfg, rngs),
        Marching::RootBand { half_width, probes_per_unit } => {
            let count = cfg.upsample_total();
            for (i, set) in sets.iter_mut().enumerate() {
                let phase = if cfg.jitter { rngs[i].random::<f64>() } else { 0.5 };
                if let Some(root) = find_root_in_intervals(&rays[i], &intervals[i], f, probes_per_unit) {
                    set.insert(&root_band_samples(root, &intervals[i], half_width, count, phase));
                }
            }
        }
    }
    sets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::analytic::Scene;
    use crate::field::ConstantField;
    use crate::geometry::{interval_union, point_in_cloud, Interval, SphereIndex};
    use crate::rng::substream;
    use crate::sphere_cloud::SphereCloud;
    use crate::geometry::cloud_intervals;

    fn set_of(pairs: &[(f64, f64)]) -> IntervalSet {
        interval_union(pairs.iter().map(|&(s, t)| Interval::new(s, t).unwrap()))
    }

    fn no_jitter(n: usize) -> SamplerConfig {
        SamplerConfig {
            n_budget: n,
            upsample_rounds: 0,
            upsample_per_round: 0,
            jitter: false,
            ..SamplerConfig::for_samples(2 * n)
        }
    }

    #[test]
    fn single_segment_linspace() {
        let p = initial_proposals(0, &set_of(&[(1.0, 3.0)]), &no_jitter(8), &mut substream(0, 0));
        assert_eq!(p.len(), 8);
        for (j, t) in p.ts.iter().enumerate() {
            assert!((t - (1.0 + 2.0 * j as f64 / 7.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_segments_split_evenly() {
        let p = initial_proposals(0, &set_of(&[(1.0, 2.0), (3.0, 4.0)]), &no_jitter(8), &mut substream(0, 0));
        assert_eq!(p.segments.iter().filter(|&&s| s == 0).count(), 4);
        assert_eq!(p.segments.iter().filter(|&&s| s == 1).count(), 4);
    }

    #[test]
    fn empty_intervals_give_empty_set() {
        let p = initial_proposals(0, &IntervalSet::empty(), &SamplerConfig::for_samples(32), &mut substream(0, 0));
        assert!(p.is_empty());
    }

    #[test]
    fn literal_allocation_and_cap() {
        let mut cfg = no_jitter(8);
        cfg.allocation = Allocation::Literal;
        // floor(8 / 0.5) = 16 for the short segment, floor(8 / 2) = 4 for the long one.
        let p = initial_proposals(0, &set_of(&[(0.0, 0.5), (1.0, 3.0)]), &cfg, &mut substream(0, 0));
        assert_eq!(p.segments.iter().filter(|&&s| s == 0).count(), 16);
        assert_eq!(p.segments.iter().filter(|&&s| s == 1).count(), 4);
        // Many tiny segments hit the total cap.
        let many: Vec<(f64, f64)> = (0..40).map(|i| (i as f64 * 0.1, i as f64 * 0.1 + 0.01)).collect();
        let p = initial_proposals(0, &set_of(&many), &cfg, &mut substream(0, 0));
        assert!(p.len() <= cfg.max_total());
    }

    #[test]
    fn proposals_stay_inside_cloud() {
        let mut rng = substream(3, 0);
        let cloud = SphereCloud::init(80, 5, 0.08);
        let index = SphereIndex::build(&cloud);
        let f = Scene::builtin("torus").unwrap();
        let cfg = SamplerConfig::for_samples(32);
        let mut checked = 0;
        for id in 0..300 {
            let o = crate::rng::uniform_in_ball(&mut rng).normalize() * 2.5;
            let target = crate::rng::uniform_in_ball(&mut rng) * 0.5;
            let Some(ray) = Ray::through_bounds(o, target - o, 1.0) else { continue };
            let iv = cloud_intervals(&ray, &cloud, &index).unwrap();
            let mut rngs = [substream(7, id)];
            let sets = propose_batch(&[id], &[ray], &[iv.clone()], &f, &cfg, &mut rngs);
            for (t, k) in sets[0].ts.iter().zip(&sets[0].segments) {
                let seg = iv.segments()[*k];
                assert!(*t >= seg.s() && *t <= seg.t());
                let inside = point_in_cloud(&ray.at(*t), &cloud, &index).unwrap();
                let near_edge = (*t - seg.s()).min(seg.t() - *t) <= crate::geometry::MERGE_EPS;
                assert!(inside || near_edge);
                checked += 1;
            }
            assert!(sets[0].len() <= cfg.max_total());
            assert!(sets[0].ts.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(checked > 1000);
    }

    #[test]
    fn flat_field_upsamples_by_length() {
        let iv = set_of(&[(0.0, 1.0), (2.0, 5.0)]);
        let mut cfg = no_jitter(16);
        cfg.upsample_rounds = 1;
        cfg.upsample_per_round = 400;
        cfg.n_budget = 120;
        let init = initial_proposals(0, &iv, &cfg, &mut substream(0, 0));
        let f = ConstantField { value: 1.0, level: 0.0 };
        let ray = Ray::new(Vec3::zeros(), Vec3::x(), 0.0, 10.0).unwrap();
        let out = upsample_importance(&init, &ray, &f, &cfg, &mut substream(0, 1));
        let new: Vec<(f64, usize)> = out
            .ts
            .iter()
            .zip(&out.segments)
            .zip(&out.stages)
            .filter(|(_, g)| **g == Stage::Upsampled)
            .map(|((t, s), _)| (*t, *s))
            .collect();
        let first = new.iter().filter(|p| p.1 == 0).count() as f64;
        let frac = first / new.len() as f64;
        assert!((frac - 0.25).abs() < 0.02, "{frac}");
        for (t, _) in &new {
            assert!(iv.contains(*t));
        }
    }

    #[test]
    fn upsampling_concentrates_at_crossing() {
        let f = Scene::builtin("unit-sphere").unwrap();
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 0.0, 4.0).unwrap();
        let iv = set_of(&[(0.6, 1.6)]);
        let cfg = SamplerConfig::for_samples(32);
        let init = initial_proposals(0, &iv, &cfg, &mut substream(1, 0));
        let out = upsample_importance(&init, &ray, &f, &cfg, &mut substream(1, 0));
        let ups: Vec<f64> = out
            .ts
            .iter()
            .zip(&out.stages)
            .filter(|(_, g)| **g == Stage::Upsampled)
            .map(|(t, _)| *t)
            .collect();
        let near = ups.iter().filter(|t| (*t - 1.0).abs() <= 2.0 * 0.04).count();
        assert!(near as f64 >= 0.6 * ups.len() as f64, "{near}/{}", ups.len());
    }

    #[test]
    fn gaps_receive_no_samples() {
        let f = Scene::builtin("unit-sphere").unwrap();
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 0.0, 4.0).unwrap();
        let iv = set_of(&[(0.2, 0.9), (0.95, 1.05), (1.1, 1.3), (2.7, 3.2)]);
        let cfg = SamplerConfig::for_samples(64);
        for seed in 0..20 {
            let init = initial_proposals(0, &iv, &cfg, &mut substream(seed, 0));
            let out = upsample_importance(&init, &ray, &f, &cfg, &mut substream(seed, 1));
            assert!(out.ts.iter().all(|t| iv.contains(*t)));
        }
    }

    #[test]
    fn abutting_segments_match_merged() {
        let f = Scene::builtin("unit-sphere").unwrap();
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 0.0, 4.0).unwrap();
        let cfg = SamplerConfig::for_samples(32);
        let split = set_of(&[(0.5, 1.0), (1.0, 1.5)]);
        let merged = set_of(&[(0.5, 1.5)]);
        assert_eq!(split, merged);
        let a = propose_batch(&[0], &[ray], &[split], &f, &cfg, &mut [substream(2, 0)]);
        let b = propose_batch(&[0], &[ray], &[merged], &f, &cfg, &mut [substream(2, 0)]);
        assert_eq!(a, b);
    }

    #[test]
    fn root_on_axis_ray() {
        let f = Scene::builtin("unit-sphere").unwrap();
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 0.0, 10.0).unwrap();
        let t = find_root_in_intervals(&ray, &set_of(&[(0.5, 1.5)]), &f, 10.0).unwrap();
        assert!((t - 1.0).abs() < 1e-6);
        assert!(find_root_in_intervals(&ray, &set_of(&[(1.2, 2.5)]), &f, 10.0).is_none());
    }

    #[test]
    fn root_matches_dense_bisection() {
        let scenes = [Scene::builtin("torus-rod").unwrap(), Scene::builtin("capsule-box").unwrap()];
        let mut rng = substream(9, 0);
        let mut found = 0;
        for s in &scenes {
            for _ in 0..100 {
                let o = crate::rng::uniform_in_ball(&mut rng).normalize() * 2.5;
                let target = crate::rng::uniform_in_ball(&mut rng) * 0.4;
                let Some(ray) = Ray::through_bounds(o, target - o, 1.0) else { continue };
                let iv = set_of(&[(ray.t_near(), ray.t_far())]);
                let probes = 200.0;
                let got = find_root_in_intervals(&ray, &iv, s, probes);
                // Oracle: 10^5 uniform steps, every sign change refined by bisection.
                let n = 100_000;
                let dt = (ray.t_far() - ray.t_near()) / n as f64;
                let mut crossings = Vec::new();
                let mut prev = s.value(&ray.at(ray.t_near()));
                for j in 1..=n {
                    let t = ray.t_near() + j as f64 * dt;
                    let v = s.value(&ray.at(t));
                    if prev.signum() != v.signum() {
                        let (mut a, mut b) = (t - dt, t);
                        for _ in 0..60 {
                            let m = 0.5 * (a + b);
                            if s.value(&ray.at(m)).signum() == prev.signum() {
                                a = m;
                            } else {
                                b = m;
                            }
                        }
                        crossings.push(0.5 * (a + b));
                    }
                    prev = v;
                }
                // Probing at a finite density may step over a grazing pair of
                // crossings closer than the probe spacing; skip such pairs.
                let spacing = 1.0 / probes;
                let mut k = 0;
                while k + 1 < crossings.len() && crossings[k + 1] - crossings[k] < 2.0 * spacing {
                    k += 2;
                }
                match (got, crossings.get(k)) {
                    (Some(g), Some(o)) => {
                        assert!((g - o).abs() < 1e-5, "{g} {o}");
                        found += 1;
                    }
                    (None, None) => {}
                    (g, o) => panic!("root mismatch {g:?} vs {o:?} ({crossings:?})"),
                }
            }
        }
        assert!(found > 50);
    }
}
