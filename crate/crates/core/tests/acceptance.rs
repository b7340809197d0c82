//! Acceptance checks. Each test prints one PASS/FAIL line for its criterion.
//!
//! Criteria 2, 7 and 8 depend on the desk benchmark. By default a reduced
//! benchmark with the same scene, views, samples per ray and seeds runs; set
//! `SPHERE_GUIDE_FULL_BENCH=1` for the full 20k-iteration configuration from
//! `configs/desk-guided.toml`. Criterion 7 only passes or fails on the full
//! run; the reduced run prints its numbers under a GATED line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphere_guide::dataset::SceneDataset;
use sphere_guide::eval::{chamfer, extract_mesh, extract_mesh_in, ChamferConfig, GroundTruth};
use sphere_guide::field::{eikonal_loss, FieldMode, ImplicitSurface, MlpConfig, MlpField, Scene, SceneNode};
use sphere_guide::geometry::{cloud_intervals, Aabb};
use sphere_guide::render::{forward_backward, propose, ray_intervals, render_rays, Guidance, HeadConfig, Model, RenderConfig};
use sphere_guide::sampler::SamplerConfig;
use sphere_guide::sphere_cloud::{step_centers, CenterOptimizer, RadiusSchedule, RepulsionConfig};
use sphere_guide::trainer::{metrics_csv, ContainmentStats, TrainConfig, Trainer};
use sphere_guide::{Ray, SphereCloud, SphereIndex, Vec3};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn report(id: u32, pass: bool, summary: &str) {
    println!("criterion {id}: {} - {summary}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {summary}");
}

/// Outcome of a criterion that is only decided by the full benchmark.
fn report_gated(id: u32, pass: bool, summary: &str) {
    if full_bench() {
        report(id, pass, summary);
    } else {
        let would = if pass { "would pass" } else { "would fail" };
        println!("criterion {id}: GATED - not decided by the reduced run ({would} at this scale); {summary}");
    }
}

fn full_bench() -> bool {
    std::env::var("SPHERE_GUIDE_FULL_BENCH").is_ok_and(|v| v == "1")
}

fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
    loop {
        let o = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if d.norm() < 1e-3 {
            continue;
        }
        if let Some(r) = Ray::through_bounds(o, d, 1.0) {
            return r;
        }
    }
}

/// Ray parameters where the ray enters or leaves sphere `(c, r)`, by the quadratic formula.
fn sphere_crossings(ray: &Ray, c: &Vec3, r: f64) -> Option<(f64, f64)> {
    let oc = ray.origin() - c;
    let b = oc.dot(&ray.direction());
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

#[test]
fn criterion_1_interval_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut probes = 0usize;
    let mut mismatches = 0usize;
    for _ in 0..10_000 {
        let m = rng.random_range(1..40);
        let radius = rng.random_range(0.01..0.4);
        let centers: Vec<Vec3> =
            (0..m).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let cloud = SphereCloud::from_centers(centers.clone(), radius, 0);
        let index = SphereIndex::build(&cloud);
        let ray = random_ray(&mut rng);
        let set = cloud_intervals(&ray, &cloud, &index).unwrap();
        // Probe random parameters plus points just inside and outside every sphere boundary.
        let mut ts: Vec<f64> = (0..32).map(|_| rng.random_range(ray.t_near()..ray.t_far())).collect();
        for c in &centers {
            if let Some((a, b)) = sphere_crossings(&ray, c, radius) {
                for t in [a - 1e-8, a + 1e-8, b - 1e-8, b + 1e-8] {
                    if t > ray.t_near() && t < ray.t_far() {
                        ts.push(t);
                    }
                }
            }
        }
        for t in ts {
            let p = ray.at(t);
            // Skip probes within 1e-9 of some sphere surface.
            let near_boundary = centers.iter().any(|c| ((p - c).norm() - radius).abs() < 1e-9);
            if near_boundary {
                continue;
            }
            let brute = centers.iter().any(|c| (p - c).norm() < radius);
            probes += 1;
            if set.contains(t) != brute {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        mismatches == 0 && elapsed < Duration::from_secs(30),
        &format!("10^4 (ray, cloud) pairs, {probes} membership probes, {mismatches} mismatches, {elapsed:.1?}"),
    );
}

/// Relative error; the floor keeps near-zero components from amplifying roundoff.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn perturbed_field(seed: u64) -> MlpField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MlpConfig { frequencies: 2, hidden_layers: 2, hidden_width: 16, features: 3, softplus_beta: 10.0, ..MlpConfig::default() };
    let mut f = MlpField::new(cfg, FieldMode::Sdf, &mut rng);
    for p in f.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    f
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9))).collect()
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut f = perturbed_field(1);

    // Input gradients: 20 random points, all three axes.
    let xs = random_points(&mut rng, 20);
    let mut input_worst: f64 = 0.0;
    let h = 1e-5;
    for x in &xs {
        let (_, g) = f.value_grad(x);
        for a in 0..3 {
            let (mut p, mut m) = (*x, *x);
            p[a] += h;
            m[a] -= h;
            let fd = (f.value(&p) - f.value(&m)) / (2.0 * h);
            input_worst = input_worst.max(rel_err(fd, g[a]));
        }
    }

    // Parameter gradients of a weighted sum of field values.
    let pts = random_points(&mut rng, 8);
    let up: Vec<f64> = (0..pts.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = vec![0.0; f.n_params()];
    f.backward_params(&pts, &up, &mut g).unwrap();
    let total = |f: &MlpField| f.values(&pts).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
    let mut param_worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(0..f.n_params());
        let fd = central(&mut f, k, 1e-6, total);
        param_worst = param_worst.max(rel_err(fd, g[k]));
    }

    // Eikonal term: gradient of a loss on input gradients w.r.t. parameters.
    let mut ge = vec![0.0; f.n_params()];
    eikonal_loss(&f, &pts, 1.0, &mut ge).unwrap();
    let mut eik_worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(0..f.n_params());
        let fd = central(&mut f, k, 1e-5, |f| eikonal_loss(f, &pts, 1.0, &mut vec![0.0; f.n_params()]).unwrap());
        eik_worst = eik_worst.max(rel_err(fd, ge[k]));
    }

    // Full renderer: photometric + Eikonal loss with frozen proposals.
    let mut mrng = ChaCha8Rng::seed_from_u64(5);
    let mlp = MlpConfig { frequencies: 2, hidden_layers: 2, hidden_width: 16, features: 4, ..MlpConfig::default() };
    let model = Model::new(mlp, FieldMode::Sdf, &HeadConfig { hidden: vec![8] }, &mut mrng);
    let rays: Vec<Ray> = (0..6)
        .map(|_| loop {
            let d = Vec3::new(mrng.random_range(-0.3..0.3), mrng.random_range(-0.3..0.3), 1.0);
            if let Some(r) = Ray::through_bounds(Vec3::new(0.0, 0.0, -2.5), d, 1.0) {
                break r;
            }
        })
        .collect();
    let ids: Vec<u64> = (0..6).collect();
    let targets = vec![[-0.5, 1.5, -0.5]; 6];
    let cfg = RenderConfig { chunk_rays: 4, sampler: SamplerConfig::for_samples(12), ..RenderConfig::default() };
    let iv = ray_intervals(&rays, None).unwrap();
    let sets = propose(&model.field, &rays, &ids, &iv, &cfg.sampler, cfg.chunk_rays, 0, 0);
    let out = forward_backward(&model, &rays, &iv, &sets, &targets, &cfg).unwrap();
    let p0 = model.params_flat();
    let mut m = model.clone();
    let mut render_worst: f64 = 0.0;
    for _ in 0..20 {
        let k = mrng.random_range(0..p0.len());
        let hh = 1e-6;
        let mut p = p0.clone();
        p[k] += hh;
        m.set_params_flat(&p);
        let lp = forward_backward(&m, &rays, &iv, &sets, &targets, &cfg).unwrap().loss;
        p[k] -= 2.0 * hh;
        m.set_params_flat(&p);
        let lm = forward_backward(&m, &rays, &iv, &sets, &targets, &cfg).unwrap().loss;
        let fd = (lp - lm) / (2.0 * hh);
        render_worst = render_worst.max(rel_err(fd, out.grads[k]));
    }
    let elapsed = start.elapsed();
    let pass = input_worst < 1e-4
        && param_worst < 1e-4
        && eik_worst < 1e-4
        && render_worst < 1e-3
        && elapsed < Duration::from_secs(120);
    report(
        3,
        pass,
        &format!(
            "worst rel. error: input {input_worst:.1e}, params {param_worst:.1e}, eikonal {eik_worst:.1e}, renderer {render_worst:.1e}; {elapsed:.1?}"
        ),
    );
}

fn central(f: &mut MlpField, k: usize, h: f64, mut loss: impl FnMut(&MlpField) -> f64) -> f64 {
    let orig = f.params()[k];
    f.params_mut()[k] = orig + h;
    let lp = loss(f);
    f.params_mut()[k] = orig - h;
    let lm = loss(f);
    f.params_mut()[k] = orig;
    (lp - lm) / (2.0 * h)
}

/// Frozen torus SDF, 2000 centers, 2000 steps.
fn converge_on_torus(lambda: f64) -> SphereCloud {
    let f = Scene::builtin("torus").unwrap();
    let m = 2000;
    let steps = 2000;
    let mut cloud = SphereCloud::init(m, 7, 0.4);
    let mut opt = CenterOptimizer::new(m, 1e-3);
    let sched = RadiusSchedule::for_run(0.4, 0.04, steps);
    let cfg = RepulsionConfig { lambda, ..RepulsionConfig::default() };
    for _ in 0..steps {
        step_centers(&mut cloud, &f, &cfg, &mut opt, &sched).unwrap();
    }
    cloud
}

#[test]
fn criterion_4_sphere_convergence() {
    let start = Instant::now();
    let f = Scene::builtin("torus").unwrap();
    let cloud = converge_on_torus(0.0);
    let again = converge_on_torus(0.0);
    let near = cloud.centers().iter().filter(|c| f.value(c).abs() < 0.04).count();
    let frac = near as f64 / cloud.len() as f64;
    let elapsed = start.elapsed();
    report(
        4,
        frac >= 0.95 && cloud == again && elapsed < Duration::from_secs(60),
        &format!("{:.2}% of 2000 centers within r_min of the torus after 2000 steps, repeatable, {elapsed:.1?}", frac * 100.0),
    );
}

#[test]
fn criterion_5_repulsion_ablation() {
    let without = converge_on_torus(0.0).median_nn_distance();
    let with = converge_on_torus(1e-4).median_nn_distance();
    report(
        5,
        with >= 2.0 * without,
        &format!("median nearest-neighbor distance {with:.4} with repulsion vs {without:.4} without ({:.2}x)", with / without),
    );
}

#[test]
fn criterion_6_vacuous_guidance() {
    let start = Instant::now();
    let ds = SceneDataset::generate(Scene::builtin("torus").unwrap(), 2, 24, 0).unwrap();
    let cam = &ds.cameras[0];
    let rays: Vec<Ray> = (0..cam.height).flat_map(|y| (0..cam.width).map(move |x| (x, y))).filter_map(|(x, y)| cam.pixel_ray(x, y)).collect();
    let ids: Vec<u64> = (0..rays.len() as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mlp = MlpConfig { hidden_layers: 2, hidden_width: 32, features: 8, ..MlpConfig::default() };
    let model = Model::new(mlp, FieldMode::Sdf, &HeadConfig { hidden: vec![16] }, &mut rng);
    let cloud = SphereCloud::from_centers(vec![Vec3::zeros()], 2.0, 0);
    let index = SphereIndex::build(&cloud);
    let cfg = RenderConfig::default();
    let guided = render_rays(&model, &rays, &ids, Some(Guidance { cloud: &cloud, index: &index }), &cfg, 9, 3).unwrap();
    let plain = render_rays(&model, &rays, &ids, None, &cfg, 9, 3).unwrap();
    let bits = |c: &[[f64; 3]]| c.iter().flat_map(|p| p.map(f64::to_bits)).collect::<Vec<u64>>();
    let identical = bits(&guided.colors) == bits(&plain.colors);
    let elapsed = start.elapsed();
    report(
        6,
        identical && elapsed < Duration::from_secs(10),
        &format!("{} rays rendered bit-identically with one all-encompassing sphere, {elapsed:.1?}", rays.len()),
    );
}

#[test]
fn criterion_9_evaluation_calibration() {
    let bounds = Aabb { min: Vec3::repeat(-1.25), max: Vec3::repeat(1.25) };
    let pred = extract_mesh_in(&Scene::builtin("unit-sphere").unwrap(), 128, 0.0, &bounds).unwrap();
    let gt = Scene::new(SceneNode::sphere(Vec3::zeros(), 1.1));
    let cfg = ChamferConfig { samples: 100_000, seed: 9, ..ChamferConfig::default() };
    let r = chamfer(&pred, &GroundTruth::Analytic(&gt), &cfg).unwrap();
    let torus = extract_mesh(&Scene::builtin("torus").unwrap(), 128, 0.0).unwrap();
    let chi = torus.euler_characteristic();
    report(
        9,
        (r.chamfer - 10.0).abs() <= 0.5 && chi == 0,
        &format!("unit vs 1.1 sphere chamfer {:.3} (x100), torus Euler characteristic {chi}", r.chamfer),
    );
}

// Desk benchmark shared by criteria 2, 7 and 8.

const BENCH_SEEDS: [u64; 3] = [0, 1, 2];

struct BenchRun {
    seed: u64,
    guided: bool,
    metrics: String,
    chamfer: f64,
    near_surface_after_floor: f64,
    containment: ContainmentStats,
}

fn bench_config(seed: u64, guided: bool) -> TrainConfig {
    let mut c = if full_bench() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk-guided.toml");
        TrainConfig::from_toml_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    } else {
        reduced_config()
    };
    c.seed = seed;
    c.guidance.guided_ray_sampling = guided;
    c.guidance.guided_ray_marching = guided;
    c.check_containment = guided;
    c
}

/// The reduced benchmark: fewer iterations and rays and a smaller network,
/// with time-dependent rates scaled to the shorter run.
fn reduced_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.iterations = 1000;
    c.batch_rays = 128;
    c.samples_per_ray = 32;
    c.checkpoint_every = 0;
    c.cloud.count = 2000;
    c.cloud.lr = 2e-3;
    c.optim.warmup_iterations = 50;
    c.field.network = MlpConfig { hidden_layers: 3, hidden_width: 32, features: 8, ..MlpConfig::default() };
    c.head.hidden = vec![32];
    c
}

fn bench_dataset() -> &'static SceneDataset {
    static DATA: OnceLock<SceneDataset> = OnceLock::new();
    DATA.get_or_init(|| SceneDataset::generate(Scene::builtin("torus-rod").unwrap(), 32, 96, 1).unwrap())
}

fn run_bench(threads: usize, evaluate: bool) -> Vec<BenchRun> {
    let data = bench_dataset();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut runs = Vec::new();
        for &seed in &BENCH_SEEDS {
            for guided in [true, false] {
                let cfg = bench_config(seed, guided);
                let floor = cfg.radius_schedule().floor_iteration();
                let mut t = Trainer::new(cfg, data).unwrap();
                t.run(None, |_| {}).unwrap();
                let out = t.into_output();
                let after: Vec<f64> =
                    out.metrics.iter().filter(|r| r.iteration >= floor).map(|r| r.near_surface_fraction).collect();
                let near = after.iter().sum::<f64>() / after.len().max(1) as f64;
                let field = &out.model.field;
                let chamfer = match extract_mesh(field, 128, field.level()) {
                    Ok(mesh) if evaluate => {
                        chamfer(&mesh, &GroundTruth::Analytic(&data.scene), &ChamferConfig::default()).unwrap().chamfer
                    }
                    Ok(_) => f64::NAN,
                    // No surface at all: worse than any mesh.
                    Err(_) => f64::INFINITY,
                };
                runs.push(BenchRun {
                    seed,
                    guided,
                    metrics: metrics_csv(&out.metrics),
                    chamfer,
                    near_surface_after_floor: near,
                    containment: out.containment,
                });
            }
        }
        runs
    })
}

fn bench() -> &'static [BenchRun] {
    static RUNS: OnceLock<Vec<BenchRun>> = OnceLock::new();
    RUNS.get_or_init(|| run_bench(1, true))
}

fn bench_label() -> &'static str {
    if full_bench() {
        "full desk benchmark"
    } else {
        "REDUCED benchmark (set SPHERE_GUIDE_FULL_BENCH=1 for the full run)"
    }
}

fn pair(runs: &[BenchRun], seed: u64) -> (&BenchRun, &BenchRun) {
    let g = runs.iter().find(|r| r.seed == seed && r.guided).unwrap();
    let u = runs.iter().find(|r| r.seed == seed && !r.guided).unwrap();
    (g, u)
}

#[test]
fn criterion_2_containment() {
    let runs = bench();
    let checked: u64 = runs.iter().filter(|r| r.guided).map(|r| r.containment.checked).sum();
    let violations: u64 = runs.iter().filter(|r| r.guided).map(|r| r.containment.violations).sum();
    report(
        2,
        checked > 0 && violations == 0,
        &format!("{checked} guided proposals checked across 3 training runs, {violations} outside the cloud [{}]", bench_label()),
    );
}

#[test]
fn criterion_7_desk_benchmark() {
    let runs = bench();
    let mut wins = 0;
    let mut ratios_ok = true;
    let mut detail = Vec::new();
    for &seed in &BENCH_SEEDS {
        let (g, u) = pair(runs, seed);
        if g.chamfer <= u.chamfer {
            wins += 1;
        }
        let ratio = g.near_surface_after_floor / u.near_surface_after_floor;
        ratios_ok &= ratio >= 2.0;
        detail.push(format!(
            "seed {seed}: chamfer {:.3} vs {:.3}, near-surface {:.3} vs {:.3} ({ratio:.1}x)",
            g.chamfer, u.chamfer, g.near_surface_after_floor, u.near_surface_after_floor
        ));
    }
    report_gated(
        7,
        wins >= 2 && ratios_ok,
        &format!("guided wins {wins}/3 on chamfer; {} [{}]", detail.join("; "), bench_label()),
    );
}

#[test]
fn criterion_8_determinism() {
    let first = bench();
    let again = run_bench(3, false);
    let identical = first.iter().zip(&again).all(|(a, b)| a.metrics == b.metrics && a.seed == b.seed);
    report(
        8,
        identical && again.len() == first.len(),
        &format!("{} benchmark runs repeated on 3 threads (first pass on 1) give byte-identical metrics.csv [{}]", first.len(), bench_label()),
    );
}
