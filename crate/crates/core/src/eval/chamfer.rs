//! Surface sampling, point-to-mesh distances and the Chamfer distance.

use super::mesh::{extract_mesh_in, TriangleMesh};
use crate::field::ImplicitSurface;
use crate::geometry::{Aabb, Vec3};
use crate::rng::substream;
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Reported distances are in scene units times this factor.
pub const CHAMFER_SCALE: f64 = 100.0;

const MAX_GRID_CELLS: usize = 1 << 21;

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

fn tri_dist2(mesh: &TriangleMesh, t: usize, p: &Vec3) -> f64 {
    let [a, b, c] = mesh.corners(t);
    (closest_point_on_triangle(p, &a, &b, &c) - p).norm_squared()
}

/// Uniform grid over triangle bounding boxes for nearest-triangle queries.
pub struct TriangleGrid<'a> {
    mesh: &'a TriangleMesh,
    min: Vec3,
    h: f64,
    dims: [usize; 3],
    start: Vec<u32>,
    entries: Vec<u32>,
}

impl<'a> TriangleGrid<'a> {
    pub fn build(mesh: &'a TriangleMesh) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for t in &mesh.triangles {
            for &i in t {
                min = min.inf(&mesh.vertices[i as usize]);
                max = max.sup(&mesh.vertices[i as usize]);
            }
        }
        if mesh.triangles.is_empty() {
            min = Vec3::zeros();
            max = Vec3::zeros();
        }
        let extent = (max - min).map(|e| e.max(1e-9));
        let target = mesh.triangles.len().clamp(1, MAX_GRID_CELLS) as f64;
        let mut h = (extent.x * extent.y * extent.z / target).cbrt().max(extent.max() / 256.0);
        let dims_for = |h: f64| [0, 1, 2].map(|a| ((extent[a] / h).ceil() as usize).max(1));
        let mut dims = dims_for(h);
        while dims.iter().product::<usize>() > MAX_GRID_CELLS {
            h *= 1.25;
            dims = dims_for(h);
        }
        let cell = |v: f64, a: usize| (((v - min[a]) / h).floor().max(0.0) as usize).min(dims[a] - 1);
        let flat = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
        let ranges: Vec<[(usize, usize); 3]> = (0..mesh.triangles.len())
            .map(|t| {
                let c = mesh.corners(t);
                [0, 1, 2].map(|a| {
                    let lo = c.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min);
                    let hi = c.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
                    (cell(lo, a), cell(hi, a))
                })
            })
            .collect();
        let n_cells: usize = dims.iter().product();
        let mut start = vec![0u32; n_cells + 1];
        for r in &ranges {
            for i in r[0].0..=r[0].1 {
                for j in r[1].0..=r[1].1 {
                    for k in r[2].0..=r[2].1 {
                        start[flat(i, j, k) + 1] += 1;
                    }
                }
            }
        }
        for c in 0..n_cells {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut entries = vec![0u32; start[n_cells] as usize];
        for (t, r) in ranges.iter().enumerate() {
            for i in r[0].0..=r[0].1 {
                for j in r[1].0..=r[1].1 {
                    for k in r[2].0..=r[2].1 {
                        let c = flat(i, j, k);
                        entries[fill[c] as usize] = t as u32;
                        fill[c] += 1;
                    }
                }
            }
        }
        Self { mesh, min, h, dims, start, entries }
    }

    /// Distance from `p` to the mesh and the index of a nearest triangle.
    pub fn nearest(&self, p: &Vec3) -> (f64, usize) {
        let dims = self.dims;
        let c = [0, 1, 2].map(|a| {
            let v = ((p[a] - self.min[a]) / self.h).floor();
            (v.max(0.0) as usize).min(dims[a] - 1)
        });
        let mut best = (f64::INFINITY, usize::MAX);
        let mut r = 0usize;
        loop {
            let lo = [0, 1, 2].map(|a| c[a].saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (c[a] + r).min(dims[a] - 1));
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let ring = [i.abs_diff(c[0]), j.abs_diff(c[1]), k.abs_diff(c[2])];
                        if *ring.iter().max().unwrap() != r {
                            continue;
                        }
                        let cell = (i * dims[1] + j) * dims[2] + k;
                        for &t in &self.entries[self.start[cell] as usize..self.start[cell + 1] as usize] {
                            let d = tri_dist2(self.mesh, t as usize, p);
                            if d < best.0 || (d == best.0 && (t as usize) < best.1) {
                                best = (d, t as usize);
                            }
                        }
                    }
                }
            }
            // Anything beyond ring r is at least this far away.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if c[a] + r + 1 < dims[a] {
                    bound = bound.min(self.min[a] + (c[a] + r + 1) as f64 * self.h - p[a]);
                }
                if c[a] > r {
                    bound = bound.min(p[a] - (self.min[a] + (c[a] - r) as f64 * self.h));
                }
            }
            if bound == f64::INFINITY || (best.1 != usize::MAX && best.0 <= bound * bound) {
                return (best.0.sqrt(), best.1);
            }
            r += 1;
        }
    }
}

/// Nearest triangle by scanning every triangle.
pub fn nearest_exhaustive(mesh: &TriangleMesh, p: &Vec3) -> (f64, usize) {
    let mut best = (f64::INFINITY, usize::MAX);
    for t in 0..mesh.triangles.len() {
        let d = tri_dist2(mesh, t, p);
        if d < best.0 {
            best = (d, t);
        }
    }
    (best.0.sqrt(), best.1)
}

/// `n` points uniformly distributed over the mesh surface.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Vec<Vec3> {
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cum.push(total);
    }
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let t = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            let [a, b, c] = mesh.corners(t);
            let s = rng.random::<f64>().sqrt();
            let v: f64 = rng.random();
            a * (1.0 - s) + b * (s * (1.0 - v)) + c * (s * v)
        })
        .collect()
}

pub enum GroundTruth<'a> {
    /// Exact field; distances from predicted points are `|f − h|`.
    Analytic(&'a dyn ImplicitSurface),
    Mesh(&'a TriangleMesh),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChamferConfig {
    pub samples: usize,
    pub seed: u64,
    /// Marching-cubes resolution used to seed samples on analytic surfaces.
    pub gt_resolution: usize,
    /// Half width of the box analytic surfaces are sampled in.
    pub gt_extent: f64,
}

impl Default for ChamferConfig {
    fn default() -> Self {
        Self { samples: 100_000, seed: 0, gt_resolution: 160, gt_extent: 1.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferReport {
    /// Mean distance from predicted samples to the ground truth.
    pub accuracy: f64,
    /// Mean distance from ground-truth samples to the prediction.
    pub completeness: f64,
    pub chamfer: f64,
    pub pred_samples: usize,
    pub gt_samples: usize,
}

impl ChamferReport {
    pub const CSV_HEADER: &'static str = "accuracy,completeness,chamfer,pred_samples,gt_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.accuracy, self.completeness, self.chamfer, self.pred_samples, self.gt_samples
        )
    }

    fn new(acc: f64, comp: f64, np: usize, ng: usize) -> Self {
        let (accuracy, completeness) = (acc * CHAMFER_SCALE, comp * CHAMFER_SCALE);
        Self { accuracy, completeness, chamfer: 0.5 * (accuracy + completeness), pred_samples: np, gt_samples: ng }
    }
}

fn mean_distance(grid: &TriangleGrid<'_>, points: &[Vec3]) -> f64 {
    let d: Vec<f64> = points.par_iter().map(|p| grid.nearest(p).0).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Points on an analytic level set: marching-cubes samples pulled onto the
/// surface by Newton steps along the gradient.
pub fn sample_level_set(f: &dyn ImplicitSurface, cfg: &ChamferConfig) -> Result<Vec<Vec3>> {
    let e = cfg.gt_extent;
    let bounds = Aabb { min: Vec3::repeat(-e), max: Vec3::repeat(e) };
    let mesh = extract_mesh_in(f, cfg.gt_resolution, f.level(), &bounds)?;
    let mut rng = substream(cfg.seed, 1);
    let mut pts = sample_surface(&mesh, cfg.samples, &mut rng);
    let h = f.level();
    pts.par_iter_mut().for_each(|p| {
        for _ in 0..4 {
            let (v, g) = f.value_grad(p);
            let g2 = g.norm_squared();
            if g2 > 0.0 {
                *p -= g * ((v - h) / g2);
            }
        }
    });
    Ok(pts)
}

/// Chamfer distance between a predicted mesh and a ground truth, in scene units ×100.
///
/// Both meshes are sampled with the same rng stream, so exchanging two meshes
/// exchanges accuracy and completeness exactly.
pub fn chamfer(pred: &TriangleMesh, gt: &GroundTruth<'_>, cfg: &ChamferConfig) -> Result<ChamferReport> {
    if pred.is_empty() || cfg.samples == 0 {
        return Err(Error::Dataset("chamfer needs a non-empty mesh and samples".into()));
    }
    let pred_pts = sample_surface(pred, cfg.samples, &mut substream(cfg.seed, 0));
    let pred_grid = TriangleGrid::build(pred);
    match gt {
        GroundTruth::Mesh(g) => {
            if g.is_empty() {
                return Err(Error::Dataset("ground-truth mesh is empty".into()));
            }
            let gt_pts = sample_surface(g, cfg.samples, &mut substream(cfg.seed, 0));
            let gt_grid = TriangleGrid::build(g);
            let acc = mean_distance(&gt_grid, &pred_pts);
            let comp = mean_distance(&pred_grid, &gt_pts);
            Ok(ChamferReport::new(acc, comp, pred_pts.len(), gt_pts.len()))
        }
        GroundTruth::Analytic(f) => {
            let h = f.level();
            let acc = f.values(&pred_pts).iter().map(|v| (v - h).abs()).sum::<f64>() / pred_pts.len() as f64;
            let gt_pts = sample_level_set(*f, cfg)?;
            let comp = mean_distance(&pred_grid, &gt_pts);
            Ok(ChamferReport::new(acc, comp, pred_pts.len(), gt_pts.len()))
        }
    }
}
