mod ablate;
mod manifest;
mod run;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use run::{evaluate, load_config, load_dataset, load_run, train_run, EvalSettings, Overrides};
use sphere_guide::dataset::SceneDataset;
use sphere_guide::field::Scene;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Usage or configuration problem; exits with code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

const THREADS_ENV: &str = "SPHERE_GUIDE_THREADS";

#[derive(Parser)]
#[command(name = "sphere-guide", version, about = "Sphere-guided neural implicit surface reconstruction")]
#[command(after_help = "Environment:\n  SPHERE_GUIDE_THREADS  worker threads (default: all cores)\n  RUST_LOG              log filter (default: info)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset.
    Generate(GenerateArgs),
    /// Train a field and sphere cloud on a dataset.
    Train(TrainArgs),
    /// Extract a mesh and compute Chamfer and sampling-efficiency reports.
    Eval(EvalArgs),
    /// Run a matrix of toggle/seed combinations sequentially.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in scene name (sphere, unit-sphere, torus, torus-rod, capsule-box).
    #[arg(long, conflicts_with = "scene_file", required_unless_present = "scene_file")]
    scene: Option<String>,
    /// Scene description as JSON.
    #[arg(long)]
    scene_file: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    views: usize,
    #[arg(long, default_value_t = 96)]
    res: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    /// Draw training rays uniformly instead of through projected spheres.
    #[arg(long)]
    no_guided_rays: bool,
    /// Sample the whole ray span instead of the cloud intervals.
    #[arg(long)]
    no_guided_marching: bool,
    /// Disable the repulsion term on sphere centers.
    #[arg(long)]
    no_repulsion: bool,
    /// Use the verbatim proposal allocation rule.
    #[arg(long)]
    literal_alg1: bool,
    /// Check that every guided proposal lies inside the cloud.
    #[arg(long)]
    check_containment: bool,
    /// Continue from a checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            iterations: self.iterations,
            samples_per_ray: self.samples_per_ray,
            guided_ray_sampling: self.no_guided_rays.then_some(false),
            guided_ray_marching: self.no_guided_marching.then_some(false),
            repulsion: self.no_repulsion.then_some(false),
            literal_alg1: self.literal_alg1.then_some(true),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset holding the ground-truth scene; defaults to the one recorded in the run manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 1024)]
    rays: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Matrix TOML listing runs and seeds.
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip runs whose manifest shows a completed run with the same config hash.
    #[arg(long)]
    resume: bool,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool")?;
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    if a.views < 2 {
        return Err(Usage(format!("--views must be at least 2, got {}", a.views)).into());
    }
    if a.res == 0 {
        return Err(Usage("--res must be positive".into()).into());
    }
    let scene = match (&a.scene, &a.scene_file) {
        (Some(name), _) => Scene::builtin(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())))?;
            Scene::from_json(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    let ds = SceneDataset::generate(scene, a.views, a.res, a.seed)?;
    ds.save(&a.out)?;
    log::info!("wrote {} views to {}", a.views, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides().apply(&mut cfg);
    if a.check_containment {
        cfg.check_containment = true;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data)?;
    train_run(&cfg, &data, &a.data, &a.out, a.resume)?;
    log::info!("training finished: {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let data_dir = a.data.clone().unwrap_or_else(|| run.manifest.data_dir.clone());
    let scene_path = data_dir.join("scene.json");
    let scene = Scene::from_json(
        &std::fs::read_to_string(&scene_path).with_context(|| format!("reading {}", scene_path.display()))?,
    )?;
    let settings = EvalSettings { resolution: a.resolution, chamfer_samples: a.samples, probe_rays: a.rays, seed: a.seed };
    if settings.resolution < 8 {
        return Err(Usage("--resolution must be at least 8".into()).into());
    }
    // Everything is computed before the output directory is touched.
    let ev = evaluate(&run, &scene, &settings)?;
    std::fs::create_dir_all(&a.out)?;
    ev.mesh.write_obj(&a.out.join("mesh.obj"))?;
    ev.mesh.write_ply(&a.out.join("mesh.ply"))?;
    write_json(&a.out.join("chamfer.json"), &ev.chamfer)?;
    write_json(&a.out.join("efficiency.json"), &ev.efficiency)?;
    println!("{}", sphere_guide::eval::ChamferReport::CSV_HEADER);
    println!("{}", ev.chamfer.csv_row());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    sphere_guide::checkpoint::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let (rows, ok) = ablate::ablate(&a.matrix, &a.data, &a.out, a.resume)?;
    log::info!("{} runs, summary in {}", rows.len(), a.out.join(ablate::SUMMARY_FILE).display());
    if !ok {
        anyhow::bail!("some runs failed; see {}", a.out.join(ablate::SUMMARY_FILE).display());
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<sphere_guide::Error>() {
            if matches!(err, sphere_guide::Error::Config { .. } | sphere_guide::Error::UnknownScene(_)) {
                return 1;
            }
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
