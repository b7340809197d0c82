use crate::manifest::{sha256_hex, RunManifest, RunStatus};
use crate::run::{evaluate, load_config, load_dataset, load_run, train_run, EvalSettings, Overrides};
use crate::Usage;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

const RESULT_FILE: &str = "result.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    #[serde(default)]
    pub set: Overrides,
}

/// An ablation matrix: every run variant crossed with every seed.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    /// Base config, relative to the matrix file. Defaults apply when absent.
    pub base: Option<PathBuf>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_samples")]
    pub chamfer_samples: usize,
    #[serde(default = "default_rays")]
    pub probe_rays: usize,
    #[serde(default)]
    pub runs: Vec<RunSpec>,
}

fn default_resolution() -> usize {
    128
}
fn default_samples() -> usize {
    100_000
}
fn default_rays() -> usize {
    1024
}

impl Matrix {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())))?;
        let m: Matrix = toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        if m.runs.is_empty() || m.seeds.is_empty() {
            return Err(Usage(format!("{}: the matrix has no runs", path.display())).into());
        }
        let mut names: Vec<&str> = m.runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Usage(format!("{}: run names must be unique", path.display())).into());
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub seed: u64,
    pub status: String,
    pub chamfer: Option<f64>,
    pub accuracy: Option<f64>,
    pub completeness: Option<f64>,
    /// Near-surface fraction under the run's own sampling mode.
    pub near_surface_fraction: Option<f64>,
    pub mean_samples_per_ray: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_seconds: f64,
}

pub const SUMMARY_HEADER: &str =
    "name,seed,status,chamfer,accuracy,completeness,near_surface_fraction,mean_samples_per_ray,final_loss,wall_seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SummaryRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.name,
            self.seed,
            self.status,
            opt(self.chamfer),
            opt(self.accuracy),
            opt(self.completeness),
            opt(self.near_surface_fraction),
            opt(self.mean_samples_per_ray),
            opt(self.final_loss),
            self.wall_seconds
        )
    }

    fn failed(name: &str, seed: u64, err: &anyhow::Error, wall: f64) -> Self {
        let msg: String = format!("{err:#}").chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
        Self {
            name: name.into(),
            seed,
            status: format!("failed: {msg}"),
            chamfer: None,
            accuracy: None,
            completeness: None,
            near_surface_fraction: None,
            mean_samples_per_ray: None,
            final_loss: None,
            wall_seconds: wall,
        }
    }
}

/// A completed run is skipped on `--resume` when its manifest hash matches.
fn completed_row(dir: &Path, hash: &str) -> Option<SummaryRow> {
    let m = RunManifest::load(dir).ok()?;
    if m.status != RunStatus::Complete || m.config_hash != hash || !m.snapshot_matches(dir) {
        return None;
    }
    serde_json::from_str(&std::fs::read_to_string(dir.join(RESULT_FILE)).ok()?).ok()
}

fn one_run(
    name: &str,
    cfg: &sphere_guide::trainer::TrainConfig,
    data: &sphere_guide::dataset::SceneDataset,
    data_dir: &Path,
    dir: &Path,
    settings: &EvalSettings,
) -> Result<SummaryRow> {
    let start = Instant::now();
    train_run(cfg, data, data_dir, dir, false)?;
    let run = load_run(dir)?;
    let ev = evaluate(&run, &data.scene, settings)?;
    let eff = if cfg.guidance.guided_ray_marching { ev.efficiency.guided } else { ev.efficiency.unguided };
    let metrics = sphere_guide::trainer::parse_metrics_csv(&std::fs::read_to_string(
        dir.join(sphere_guide::trainer::METRICS_FILE),
    )?)?;
    let row = SummaryRow {
        name: name.into(),
        seed: cfg.seed,
        status: "ok".into(),
        chamfer: Some(ev.chamfer.chamfer),
        accuracy: Some(ev.chamfer.accuracy),
        completeness: Some(ev.chamfer.completeness),
        near_surface_fraction: Some(eff.near_surface_fraction),
        mean_samples_per_ray: Some(eff.mean_samples_per_ray),
        final_loss: metrics.last().map(|r| r.loss),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::write(dir.join(RESULT_FILE), serde_json::to_string_pretty(&row)?)?;
    Ok(row)
}

/// Runs the matrix sequentially. Returns the rows and whether every run succeeded.
pub fn ablate(matrix_path: &Path, data_dir: &Path, out: &Path, resume: bool) -> Result<(Vec<SummaryRow>, bool)> {
    let matrix = Matrix::load(matrix_path)?;
    let base_path = matrix.base.as_ref().map(|b| matrix_path.parent().unwrap_or(Path::new(".")).join(b));
    let base = load_config(base_path.as_deref())?;
    // Reject bad variants before any compute.
    let mut plan = Vec::new();
    for spec in &matrix.runs {
        for &seed in &matrix.seeds {
            let mut cfg = base.clone();
            spec.set.apply(&mut cfg);
            cfg.seed = seed;
            cfg.validate().with_context(|| format!("run `{}`", spec.name))?;
            plan.push((spec.name.clone(), cfg));
        }
    }
    let data = load_dataset(data_dir)?;
    std::fs::create_dir_all(out)?;
    let settings = EvalSettings {
        resolution: matrix.resolution,
        chamfer_samples: matrix.chamfer_samples,
        probe_rays: matrix.probe_rays,
        seed: 0,
    };
    let mut rows = Vec::with_capacity(plan.len());
    let mut all_ok = true;
    for (name, cfg) in &plan {
        let dir = out.join(format!("{name}-seed{}", cfg.seed));
        let hash = sha256_hex(cfg.to_toml_string().as_bytes());
        if resume {
            if let Some(row) = completed_row(&dir, &hash) {
                log::info!("skipping completed run {}", dir.display());
                rows.push(row);
                continue;
            }
        }
        log::info!("run {} (seed {})", name, cfg.seed);
        let start = Instant::now();
        match one_run(name, cfg, &data, data_dir, &dir, &settings) {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::error!("run {name} seed {} failed: {e:#}", cfg.seed);
                all_ok = false;
                rows.push(SummaryRow::failed(name, cfg.seed, &e, start.elapsed().as_secs_f64()));
            }
        }
        write_summary(out, &rows)?;
    }
    write_summary(out, &rows)?;
    Ok((rows, all_ok))
}

fn write_summary(out: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut text = String::from(SUMMARY_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    sphere_guide::checkpoint::write_atomic(&out.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(())
}
