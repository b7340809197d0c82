//! Training and evaluation steps shared by `train`, `eval` and `ablate`.

use crate::manifest::{now, RunManifest, RunStatus, CONFIG_SNAPSHOT};
use crate::Usage;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sphere_guide::dataset::{SceneDataset, CAMERA_DISTANCE};
use sphere_guide::eval::{
    chamfer, extract_mesh, probe_rays, sampling_efficiency, ChamferConfig, ChamferReport, EfficiencyReport, GroundTruth,
    TriangleMesh,
};
use sphere_guide::field::{ImplicitSurface, Scene};
use sphere_guide::render::{Guidance, Model};
use sphere_guide::trainer::{model_from_bytes, TrainConfig, Trainer, CLOUD_CKPT, FIELD_CKPT, METRICS_FILE};
use sphere_guide::{SphereCloud, SphereIndex};
use std::path::Path;

/// Config overrides shared by command-line flags and ablation matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<u64>,
    pub samples_per_ray: Option<usize>,
    pub guided_ray_sampling: Option<bool>,
    pub guided_ray_marching: Option<bool>,
    pub repulsion: Option<bool>,
    pub literal_alg1: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        if let Some(n) = self.samples_per_ray {
            cfg.samples_per_ray = n;
        }
        let g = &mut cfg.guidance;
        if let Some(v) = self.guided_ray_sampling {
            g.guided_ray_sampling = v;
        }
        if let Some(v) = self.guided_ray_marching {
            g.guided_ray_marching = v;
        }
        if let Some(v) = self.repulsion {
            g.repulsion = v;
        }
        if let Some(v) = self.literal_alg1 {
            g.literal_alg1 = v;
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Usage(format!("cannot read {}: {e}", p.display())))?;
            TrainConfig::from_toml_str(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

/// Trains into `out`, writing the config snapshot and manifest first.
/// With `resume`, continues from an existing checkpoint whose snapshot matches.
pub fn train_run(cfg: &TrainConfig, data: &SceneDataset, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    cfg.validate()?;
    let snapshot = cfg.to_toml_string();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let can_resume = resume && out.join(FIELD_CKPT).exists();
    let mut manifest = if can_resume {
        let m = RunManifest::load(out)?;
        if m.config_hash != crate::manifest::sha256_hex(snapshot.as_bytes()) || !m.snapshot_matches(out) {
            return Err(Usage(format!("{} holds a run with a different configuration", out.display())).into());
        }
        RunManifest { status: RunStatus::Running, finished_at: None, error: None, ..m }
    } else {
        sphere_guide::checkpoint::write_atomic(&out.join(CONFIG_SNAPSHOT), snapshot.as_bytes())?;
        RunManifest::new(&snapshot, cfg.seed, data_dir)
    };
    manifest.save(out)?;

    let mut trainer = if can_resume {
        log::info!("resuming from {}", out.display());
        Trainer::resume(cfg.clone(), data, out)?
    } else {
        Trainer::new(cfg.clone(), data)?
    };
    let total = cfg.iterations;
    let every = (total / 20).max(1);
    let result = trainer.run(Some(out), |row| {
        if (row.iteration + 1) % every == 0 || row.iteration + 1 == total {
            log::info!(
                "iter {}/{} loss {:.5} eikonal {:.5} radius {:.4} near-surface {:.3}",
                row.iteration + 1,
                total,
                row.loss,
                row.eikonal,
                row.radius,
                row.near_surface_fraction
            );
        }
    });
    manifest.finished_at = Some(now());
    manifest.outputs = [CONFIG_SNAPSHOT, FIELD_CKPT, CLOUD_CKPT, METRICS_FILE].map(String::from).to_vec();
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            manifest.save(out)?;
            Ok(())
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.save(out)?;
            Err(e.into())
        }
    }
}

/// A finished run loaded back from disk.
pub struct LoadedRun {
    pub config: TrainConfig,
    pub model: Model,
    pub cloud: SphereCloud,
    pub manifest: RunManifest,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = RunManifest::load(dir)?;
    if !manifest.snapshot_matches(dir) {
        anyhow::bail!("config snapshot in {} does not match the manifest hash", dir.display());
    }
    let text = std::fs::read_to_string(dir.join(CONFIG_SNAPSHOT))?;
    let config = TrainConfig::from_toml_str(&text)?;
    let fpath = dir.join(FIELD_CKPT);
    let bytes = std::fs::read(&fpath).with_context(|| format!("reading {}", fpath.display()))?;
    let (model, _, _) = model_from_bytes(&bytes, &fpath)?;
    let (cloud, _) = SphereCloud::load(&dir.join(CLOUD_CKPT)).with_context(|| format!("reading cloud in {}", dir.display()))?;
    Ok(LoadedRun { config, model, cloud, manifest })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub resolution: usize,
    pub chamfer_samples: usize,
    pub probe_rays: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencySummary {
    pub threshold: f64,
    pub samples_per_ray: usize,
    pub unguided: EfficiencyReport,
    pub guided: EfficiencyReport,
}

pub struct Evaluation {
    pub mesh: TriangleMesh,
    pub chamfer: ChamferReport,
    pub efficiency: EfficiencySummary,
}

/// Mesh extraction, Chamfer against the analytic scene and sampling efficiency
/// on a fixed probe-ray set.
pub fn evaluate(run: &LoadedRun, scene: &Scene, s: &EvalSettings) -> Result<Evaluation> {
    let field = &run.model.field;
    let mesh = extract_mesh(field, s.resolution, field.level())?;
    let ccfg = ChamferConfig { samples: s.chamfer_samples, seed: s.seed, ..ChamferConfig::default() };
    let chamfer = chamfer(&mesh, &GroundTruth::Analytic(scene), &ccfg)?;
    let rays = probe_rays(s.probe_rays, CAMERA_DISTANCE, 0.8, s.seed);
    let sampler = run.config.render_config().sampler;
    let threshold = run.config.cloud.r_min;
    let index = SphereIndex::build(&run.cloud);
    let guidance = Guidance { cloud: &run.cloud, index: &index };
    let unguided = sampling_efficiency(field, None, &rays, &sampler, threshold, s.seed)?;
    let guided = sampling_efficiency(field, Some(guidance), &rays, &sampler, threshold, s.seed)?;
    Ok(Evaluation {
        mesh,
        chamfer,
        efficiency: EfficiencySummary { threshold, samples_per_ray: run.config.samples_per_ray, unguided, guided },
    })
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    SceneDataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}
