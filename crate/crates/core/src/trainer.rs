//! The alternating optimization loop: field and radiance head by Adam on the
//! photometric + Eikonal loss, sphere cloud by its own surface/repulsion step,
//! with cloud-guided selection of training rays and of samples along rays.

use crate::adam::{Adam, AdamConfig};
use crate::checkpoint::{write_atomic, Decoder, Encoder};
use crate::dataset::SceneDataset;
use crate::field::{Activation, Dense, FieldMode, MlpConfig, MlpField};
use crate::geometry::{Ray, SphereIndex, MERGE_EPS};
use crate::render::{
    forward_backward, propose, proposal_points, ray_intervals, Guidance, HeadConfig, Model, RadianceHead, RenderConfig,
    Rgb,
};
use crate::rng::{stream_seed, substream, uniform_in_ball};
use crate::sampler::{Allocation, Marching, SamplerConfig};
use crate::sphere_cloud::{
    resample_empty, resample_out_of_bounds, step_centers, CenterOptimizer, CloudSchedule, RadiusSchedule,
    RepulsionConfig, SphereCloud,
};
use crate::{Error, Result};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Draw training pixels by projecting points inside the spheres.
    pub guided_ray_sampling: bool,
    /// Restrict samples along each ray to the cloud intervals.
    pub guided_ray_marching: bool,
    pub repulsion: bool,
    /// Top up the ray batch with uniform pixels when too few sphere pixels survive.
    pub ray_fallback: bool,
    /// Per-segment counts `floor(n / (t − s))` instead of a proportional split.
    pub literal_alg1: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            guided_ray_sampling: true,
            guided_ray_marching: true,
            repulsion: true,
            ray_fallback: true,
            literal_alg1: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    pub count: usize,
    pub r_max: f64,
    pub r_min: f64,
    pub lr: f64,
    pub repulsion: RepulsionConfig,
    /// Number of empty-sphere resamples, evenly spaced over the run.
    pub empty_resamples: u32,
    /// Interior samples per sphere for the emptiness test.
    pub empty_samples: usize,
    /// Out-of-bounds resampling period as a fraction of the run (0 disables).
    pub oob_fraction: f64,
    /// Relocation spread in units of `r_min`.
    pub sigma_factor: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            r_max: 0.4,
            r_min: 0.04,
            lr: 1e-4,
            repulsion: RepulsionConfig::default(),
            empty_resamples: 8,
            empty_samples: 1000,
            oob_fraction: 0.25,
            sigma_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub network: MlpConfig,
    pub mode: FieldModeConfig,
}

/// `FieldMode` with a default, for config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldModeConfig(pub FieldMode);

impl Default for FieldModeConfig {
    fn default() -> Self {
        Self(FieldMode::Sdf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub background: Rgb,
    pub eikonal_weight: f64,
    pub near_surface_threshold: f64,
    pub chunk_rays: usize,
    pub jitter: bool,
    pub s_sharpness: f64,
    pub marching: Marching,
}

impl Default for RenderSettings {
    fn default() -> Self {
        let r = RenderConfig::default();
        Self {
            background: r.background,
            eikonal_weight: r.eikonal_weight,
            near_surface_threshold: r.near_surface_threshold,
            chunk_rays: r.chunk_rays,
            jitter: r.sampler.jitter,
            s_sharpness: r.sampler.s_sharpness,
            marching: r.sampler.marching,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_iterations: u64,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub final_lr_factor: f64,
    /// Multiplier on the learning rate of the log-sharpness parameter.
    pub sharpness_lr_scale: f64,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup_iterations: 500,
            final_lr_factor: 0.05,
            sharpness_lr_scale: 10.0,
            adam: AdamConfig::default(),
        }
    }
}

/// Everything a training run depends on besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_rays: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    /// Sphere-cloud step every this many iterations.
    pub sphere_update_period: u64,
    /// Checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Verify every guided proposal lies inside the cloud.
    pub check_containment: bool,
    pub guidance: GuidanceConfig,
    pub cloud: CloudConfig,
    pub field: FieldConfig,
    pub head: HeadConfig,
    pub render: RenderSettings,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_rays: 512,
            samples_per_ray: 32,
            seed: 0,
            sphere_update_period: 1,
            checkpoint_every: 5000,
            check_containment: false,
            guidance: GuidanceConfig::default(),
            cloud: CloudConfig::default(),
            field: FieldConfig::default(),
            head: HeadConfig::default(),
            render: RenderSettings::default(),
            optim: OptimConfig::default(),
        }
    }
}

fn positive(v: f64, path: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    /// Parse TOML, rejecting unknown keys; errors carry the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::config("batch_rays", "must be at least 1"));
        }
        if self.samples_per_ray < 4 {
            return Err(Error::config("samples_per_ray", "must be at least 4"));
        }
        if self.sphere_update_period == 0 {
            return Err(Error::config("sphere_update_period", "must be at least 1"));
        }
        let c = &self.cloud;
        if c.count == 0 {
            return Err(Error::config("cloud.count", "must be at least 1"));
        }
        positive(c.r_min, "cloud.r_min")?;
        positive(c.r_max, "cloud.r_max")?;
        if c.r_max <= c.r_min {
            return Err(Error::config("cloud.r_max", "must exceed cloud.r_min"));
        }
        positive(c.lr, "cloud.lr")?;
        if c.repulsion.k == 0 {
            return Err(Error::config("cloud.repulsion.k", "must be at least 1"));
        }
        positive(c.repulsion.d_factor, "cloud.repulsion.d_factor")?;
        if !(c.repulsion.lambda >= 0.0 && c.repulsion.lambda.is_finite()) {
            return Err(Error::config("cloud.repulsion.lambda", "must be non-negative"));
        }
        if c.empty_samples == 0 {
            return Err(Error::config("cloud.empty_samples", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&c.oob_fraction) {
            return Err(Error::config("cloud.oob_fraction", "must lie in [0, 1]"));
        }
        positive(c.sigma_factor, "cloud.sigma_factor")?;
        self.field.network.validate("field.network")?;
        if let FieldMode::Occupancy { scale } = self.field.mode.0 {
            positive(scale, "field.mode.scale")?;
        }
        positive(self.optim.lr, "optim.lr")?;
        positive(self.optim.sharpness_lr_scale, "optim.sharpness_lr_scale")?;
        if !(0.0..=1.0).contains(&self.optim.final_lr_factor) {
            return Err(Error::config("optim.final_lr_factor", "must lie in [0, 1]"));
        }
        let a = &self.optim.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("optim.adam", "betas must lie in [0, 1)"));
        }
        positive(a.eps, "optim.adam.eps")?;
        if self.head.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("head.hidden", "layer widths must be positive"));
        }
        self.render_config().validate("render")
    }

    pub fn render_config(&self) -> RenderConfig {
        let mut sampler = SamplerConfig::for_samples(self.samples_per_ray);
        sampler.jitter = self.render.jitter;
        sampler.s_sharpness = self.render.s_sharpness;
        sampler.marching = self.render.marching;
        if self.guidance.literal_alg1 {
            sampler.allocation = Allocation::Literal;
        }
        RenderConfig {
            background: self.render.background,
            eikonal_weight: self.render.eikonal_weight,
            near_surface_threshold: self.render.near_surface_threshold,
            chunk_rays: self.render.chunk_rays,
            sampler,
        }
    }

    pub fn repulsion(&self) -> RepulsionConfig {
        let mut r = self.cloud.repulsion;
        if !self.guidance.repulsion {
            r.lambda = 0.0;
        }
        r
    }

    /// The cloud is only optimized when something uses it.
    pub fn cloud_active(&self) -> bool {
        self.guidance.guided_ray_sampling || self.guidance.guided_ray_marching
    }

    pub fn radius_schedule(&self) -> RadiusSchedule {
        RadiusSchedule::for_run(self.cloud.r_max, self.cloud.r_min, self.iterations.max(1))
    }

    pub fn cloud_schedule(&self) -> CloudSchedule {
        let oob = (self.iterations as f64 * self.cloud.oob_fraction).round() as u64;
        CloudSchedule::for_run(self.iterations, self.cloud.empty_resamples, oob)
    }

    /// Field learning rate at iteration `n`: linear warmup, then cosine decay.
    pub fn lr_at(&self, n: u64) -> f64 {
        let o = &self.optim;
        let w = o.warmup_iterations.min(self.iterations);
        if n < w {
            return o.lr * (n + 1) as f64 / w as f64;
        }
        let span = (self.iterations - w).max(1) as f64;
        let p = ((n - w) as f64 / span).min(1.0);
        o.lr * (o.final_lr_factor + (1.0 - o.final_lr_factor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

/// One training pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRef {
    pub view: u32,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub pixels: Vec<PixelRef>,
    pub rays: Vec<Ray>,
    pub ids: Vec<u64>,
    pub targets: Vec<Rgb>,
    /// How many pixels came from the uniform fallback.
    pub fallback: usize,
}

impl RayBatch {
    fn push(&mut self, data: &SceneDataset, p: PixelRef) {
        // Pixels whose ray misses the scene ball carry no gradient and are dropped.
        if let Some(ray) = data.cameras[p.view as usize].pixel_ray(p.x, p.y) {
            self.ids.push(self.rays.len() as u64);
            self.rays.push(ray);
            self.targets.push(data.images[p.view as usize].get(p.x, p.y));
            self.pixels.push(p);
        }
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// One uniform point inside each sphere, projected into a random view;
/// out-of-frame projections are discarded.
pub fn guided_pixel_candidates<R: Rng + ?Sized>(
    cloud: &SphereCloud,
    cameras: &[crate::dataset::Camera],
    rng: &mut R,
) -> Vec<PixelRef> {
    let r = cloud.radius();
    let mut out = Vec::with_capacity(cloud.len());
    for c in cloud.centers() {
        let p = c + uniform_in_ball(rng) * r;
        let view = rng.random_range(0..cameras.len());
        if let Some((x, y)) = cameras[view].project_pixel(&p) {
            out.push(PixelRef { view: view as u32, x, y });
        }
    }
    out
}

/// `n` pixels drawn uniformly over all images.
pub fn uniform_pixels<R: Rng + ?Sized>(cameras: &[crate::dataset::Camera], n: usize, rng: &mut R) -> Vec<PixelRef> {
    let mut offsets = Vec::with_capacity(cameras.len() + 1);
    let mut total = 0usize;
    for c in cameras {
        offsets.push(total);
        total += c.n_pixels();
    }
    (0..n)
        .map(|_| {
            let g = rng.random_range(0..total);
            let view = offsets.partition_point(|&o| o <= g) - 1;
            let local = g - offsets[view];
            let w = cameras[view].width as usize;
            PixelRef { view: view as u32, x: (local % w) as u32, y: (local / w) as u32 }
        })
        .collect()
}

/// Cloud-guided training rays with optional uniform top-up.
pub fn sample_training_rays<R: Rng + ?Sized>(
    cloud: &SphereCloud,
    data: &SceneDataset,
    batch: usize,
    fallback: bool,
    rng: &mut R,
) -> Result<RayBatch> {
    let candidates = guided_pixel_candidates(cloud, &data.cameras, rng);
    if candidates.is_empty() {
        return Err(Error::NoValidRays);
    }
    let mut out = RayBatch::default();
    if candidates.len() >= batch {
        for i in sample_indices(rng, candidates.len(), batch).iter() {
            out.push(data, candidates[i]);
        }
    } else {
        for &p in &candidates {
            out.push(data, p);
        }
        if fallback {
            let extra = batch - candidates.len();
            log::debug!("only {} guided pixels; {} uniform pixels added", candidates.len(), extra);
            out.fallback = extra;
            for p in uniform_pixels(&data.cameras, extra, rng) {
                out.push(data, p);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidRays);
    }
    Ok(out)
}

pub fn uniform_training_rays<R: Rng + ?Sized>(data: &SceneDataset, batch: usize, rng: &mut R) -> RayBatch {
    let mut out = RayBatch::default();
    for p in uniform_pixels(&data.cameras, batch, rng) {
        out.push(data, p);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: f64,
    pub eikonal: f64,
    pub radius: f64,
    pub near_surface_fraction: f64,
    pub resampled_count: usize,
}

pub const METRICS_HEADER: &str = "iteration,loss,eikonal,radius,near_surface_fraction,resampled_count";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iteration, r.loss, r.eikonal, r.radius, r.near_surface_fraction, r.resampled_count
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let bad = |line: usize| Error::Dataset(format!("malformed metrics.csv at line {line}"));
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad(1));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let v: Vec<&str> = l.split(',').collect();
            if v.len() != 6 {
                return Err(bad(i + 2));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2));
            Ok(MetricsRow {
                iteration: v[0].parse().map_err(|_| bad(i + 2))?,
                loss: f(v[1])?,
                eikonal: f(v[2])?,
                radius: f(v[3])?,
                near_surface_fraction: f(v[4])?,
                resampled_count: v[5].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContainmentStats {
    pub checked: u64,
    pub violations: u64,
}

const MODEL_MAGIC: &[u8; 8] = b"SGMODEL\0";
const MODEL_VERSION: u32 = 1;

pub const FIELD_CKPT: &str = "field.ckpt";
pub const CLOUD_CKPT: &str = "cloud.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Model, its optimizer and the iteration counter.
pub fn model_to_bytes(model: &Model, opt: &Adam, iteration: u64) -> Vec<u8> {
    let mut e = Encoder::new(MODEL_MAGIC, MODEL_VERSION);
    e.u64(iteration);
    e.bytes(&model.field.to_bytes());
    let sizes = model.head.net().sizes();
    e.u64(sizes.len() as u64);
    for &s in sizes {
        e.u64(s as u64);
    }
    e.f64s(model.head.params());
    e.f64(model.log_s);
    e.f64(opt.cfg.beta1);
    e.f64(opt.cfg.beta2);
    e.f64(opt.cfg.eps);
    e.u64(opt.t);
    e.f64s(&opt.m);
    e.f64s(&opt.v);
    e.finish()
}

pub fn model_from_bytes(data: &[u8], path: &Path) -> Result<(Model, Adam, u64)> {
    let mut d = Decoder::new(data, path, MODEL_MAGIC, MODEL_VERSION)?;
    let iteration = d.u64()?;
    let field = MlpField::from_bytes(d.bytes()?, path)?;
    let n_sizes = d.u64()? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(d.err("bad radiance head layer count"));
    }
    let sizes = (0..n_sizes).map(|_| d.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
        return Err(d.err("bad radiance head layer size"));
    }
    let mut net = Dense::new(&sizes, Activation::Relu);
    let params = d.f64s()?;
    if params.len() != net.n_params() {
        return Err(d.err("radiance head parameter count mismatch"));
    }
    net.params = params;
    let head = RadianceHead::from_dense(net);
    if head.input_dim() != crate::render::head_input_dim(field.config().features) {
        return Err(d.err("radiance head does not match field features"));
    }
    let log_s = d.f64()?;
    let cfg = AdamConfig { beta1: d.f64()?, beta2: d.f64()?, eps: d.f64()? };
    let t = d.u64()?;
    let m = d.f64s()?;
    let v = d.f64s()?;
    d.finish()?;
    let model = Model { field, head, log_s };
    if m.len() != model.n_params() || v.len() != model.n_params() {
        return Err(Error::Checkpoint { path: path.to_path_buf(), message: "optimizer state size mismatch".into() });
    }
    Ok((model, Adam { cfg, m, v, t }, iteration))
}

/// Training state; advance with [`Trainer::step`].
pub struct Trainer<'a> {
    cfg: TrainConfig,
    render: RenderConfig,
    data: &'a SceneDataset,
    pub model: Model,
    field_opt: Adam,
    pub cloud: SphereCloud,
    center_opt: CenterOptimizer,
    index: SphereIndex,
    radius_schedule: RadiusSchedule,
    cloud_schedule: CloudSchedule,
    iteration: u64,
    metrics: Vec<MetricsRow>,
    containment: ContainmentStats,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a SceneDataset) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let mut rng = substream(stream_seed(cfg.seed, "field"), 0);
        let model = Model::new(cfg.field.network, cfg.field.mode.0, &cfg.head, &mut rng);
        let field_opt = Adam::new(model.n_params(), cfg.optim.adam);
        let cloud = SphereCloud::init(cfg.cloud.count, stream_seed(cfg.seed, "cloud"), cfg.cloud.r_max);
        let center_opt = CenterOptimizer::new(cfg.cloud.count, cfg.cloud.lr);
        Ok(Self::assemble(cfg, data, model, field_opt, cloud, center_opt, 0, Vec::new()))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        data: &'a SceneDataset,
        model: Model,
        field_opt: Adam,
        cloud: SphereCloud,
        center_opt: CenterOptimizer,
        iteration: u64,
        metrics: Vec<MetricsRow>,
    ) -> Self {
        let index = SphereIndex::build(&cloud);
        Self {
            render: cfg.render_config(),
            radius_schedule: cfg.radius_schedule(),
            cloud_schedule: cfg.cloud_schedule(),
            cfg,
            data,
            model,
            field_opt,
            cloud,
            center_opt,
            index,
            iteration,
            metrics,
            containment: ContainmentStats::default(),
        }
    }

    /// Restore from a checkpoint directory written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: TrainConfig, data: &'a SceneDataset, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let fpath = dir.join(FIELD_CKPT);
        let (model, field_opt, iteration) = model_from_bytes(&std::fs::read(&fpath)?, &fpath)?;
        let (cloud, center_opt) = SphereCloud::load(&dir.join(CLOUD_CKPT))?;
        let mut metrics = parse_metrics_csv(&std::fs::read_to_string(dir.join(METRICS_FILE))?)?;
        if metrics.len() < iteration as usize {
            return Err(Error::Dataset("metrics.csv is shorter than the checkpoint".into()));
        }
        metrics.truncate(iteration as usize);
        if cloud.len() != cfg.cloud.count || model.field.config() != &cfg.field.network {
            return Err(Error::config("<root>", "checkpoint does not match the configuration"));
        }
        Ok(Self::assemble(cfg, data, model, field_opt, cloud, center_opt, iteration, metrics))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn containment(&self) -> ContainmentStats {
        self.containment
    }

    pub fn index(&self) -> &SphereIndex {
        &self.index
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    fn check_containment(&mut self, rays: &[Ray], sets: &[crate::sampler::ProposalSet]) {
        let r = self.cloud.radius() + MERGE_EPS;
        let centers = self.cloud.centers();
        for p in proposal_points(rays, sets) {
            self.containment.checked += 1;
            let inside = self
                .index
                .query_point(&p)
                .iter()
                .any(|&i| (p - centers[i as usize]).norm() < r);
            if !inside {
                self.containment.violations += 1;
            }
        }
    }

    /// One training iteration.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let n = self.iteration;
        // the cloud is public and may have been edited since the last step
        if self.index.check(&self.cloud).is_err() {
            self.index = SphereIndex::build(&self.cloud);
        }
        let cfg = &self.cfg;
        let mut rng = substream(stream_seed(cfg.seed, "rays"), n);
        let batch = if cfg.guidance.guided_ray_sampling {
            sample_training_rays(&self.cloud, self.data, cfg.batch_rays, cfg.guidance.ray_fallback, &mut rng)?
        } else {
            uniform_training_rays(self.data, cfg.batch_rays, &mut rng)
        };
        let guidance = cfg
            .guidance
            .guided_ray_marching
            .then_some(Guidance { cloud: &self.cloud, index: &self.index });
        let intervals = ray_intervals(&batch.rays, guidance)?;
        let sets = propose(
            &self.model.field,
            &batch.rays,
            &batch.ids,
            &intervals,
            &self.render.sampler,
            self.render.chunk_rays,
            stream_seed(cfg.seed, "sampler"),
            n,
        );
        if cfg.check_containment && cfg.guidance.guided_ray_marching {
            self.check_containment(&batch.rays, &sets);
        }
        let out = forward_backward(&self.model, &batch.rays, &intervals, &sets, &batch.targets, &self.render)?;
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: n });
        }
        let lr = self.cfg.lr_at(n);
        let mut params = self.model.params_flat();
        let last = params.len() - 1;
        let s_lr = lr * self.cfg.optim.sharpness_lr_scale;
        // log_s is the last parameter
        self.field_opt.step_by(&mut params, &out.grads, |i| if i == last { s_lr } else { lr });
        self.model.set_params_flat(&params);

        let next = n + 1;
        let mut resampled = 0;
        if self.cfg.cloud_active() {
            if next % self.cfg.sphere_update_period == 0 {
                let rep = self.cfg.repulsion();
                step_centers(&mut self.cloud, &self.model.field, &rep, &mut self.center_opt, &self.radius_schedule)?;
            }
            let sigma = self.cfg.cloud.sigma_factor * self.cfg.cloud.r_min;
            if self.cloud_schedule.empty_due(next) {
                let k = self.cfg.cloud.empty_samples;
                resampled += resample_empty(&mut self.cloud, &self.model.field, k, sigma, &mut self.center_opt)?.0;
            }
            if self.cloud_schedule.oob_due(next) {
                resampled += resample_out_of_bounds(&mut self.cloud, sigma, &mut self.center_opt);
            }
        }
        // Keep the radius on schedule even when no center step ran.
        self.cloud.set_iteration(next);
        self.cloud.set_radius(self.radius_schedule.radius_at(next));
        self.index = SphereIndex::build(&self.cloud);
        self.iteration = next;
        let row = MetricsRow {
            iteration: next,
            loss: out.loss,
            eikonal: out.eikonal,
            radius: self.cloud.radius(),
            near_surface_fraction: out.diagnostics.near_surface_fraction(),
            resampled_count: resampled,
        };
        self.metrics.push(row);
        Ok(row)
    }

    /// Writes field, cloud and metrics; each file is replaced atomically.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(FIELD_CKPT), &model_to_bytes(&self.model, &self.field_opt, self.iteration))?;
        self.cloud.save(&self.center_opt, &dir.join(CLOUD_CKPT))?;
        write_atomic(&dir.join(METRICS_FILE), metrics_csv(&self.metrics).as_bytes())
    }

    /// Runs to completion, checkpointing into `dir` if given. On failure the
    /// last consistent state is checkpointed before the error is returned.
    pub fn run(&mut self, dir: Option<&Path>, mut on_row: impl FnMut(&MetricsRow)) -> Result<()> {
        while !self.is_done() {
            match self.step() {
                Ok(row) => on_row(&row),
                Err(e) => {
                    if let Some(d) = dir {
                        self.save_checkpoint(d)?;
                    }
                    return Err(e);
                }
            }
            let every = self.cfg.checkpoint_every;
            if let Some(d) = dir {
                if every > 0 && self.iteration % every == 0 && !self.is_done() {
                    self.save_checkpoint(d)?;
                }
            }
        }
        if let Some(d) = dir {
            self.save_checkpoint(d)?;
        }
        Ok(())
    }

    pub fn into_output(self) -> TrainOutput {
        TrainOutput { model: self.model, cloud: self.cloud, metrics: self.metrics, containment: self.containment }
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub cloud: SphereCloud,
    pub metrics: Vec<MetricsRow>,
    pub containment: ContainmentStats,
}

/// Trains from scratch without writing to disk.
pub fn train(cfg: TrainConfig, data: &SceneDataset) -> Result<TrainOutput> {
    let mut t = Trainer::new(cfg, data)?;
    t.run(None, |_| {})?;
    Ok(t.into_output())
}
