use super::SphereCloud;
use crate::field::ImplicitSurface;
use crate::geometry::Vec3;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepulsionConfig {
    pub k: usize,
    pub d_factor: f64,
    pub lambda: f64,
}

impl Default for RepulsionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            d_factor: 2.0,
            lambda: 1e-4,
        }
    }
}

const MIN_DISTANCE: f64 = 1e-8;
const COINCIDENT_JITTER: f64 = 1e-6;

/// `Σ_i |f(c_i) − h|` and its per-center subgradient.
pub fn surface_loss(cloud: &SphereCloud, f: &dyn ImplicitSurface) -> Result<(f64, Vec<Vec3>)> {
    let h = f.level();
    let vg = f.values_grads(cloud.centers());
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(vg.len());
    for (c, (v, g)) in cloud.centers().iter().zip(vg) {
        if !v.is_finite() || !g.iter().all(|x| x.is_finite()) {
            return Err(Error::non_finite(c));
        }
        let r = v - h;
        loss += r.abs();
        let s = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        grads.push(g * s);
    }
    Ok((loss, grads))
}

/// For every point, up to `k` other points closer than `cutoff` (strict),
/// ordered by `(distance, index)`.
pub fn knn_within(points: &[Vec3], k: usize, cutoff: f64) -> Vec<Vec<(usize, f64)>> {
    let n = points.len();
    if n < 2 || k == 0 {
        return vec![Vec::new(); n];
    }
    let grid = PointGrid::new(points);
    (0..n)
        .into_par_iter()
        .map(|i| grid.knn(points, i, k, cutoff))
        .collect()
}

struct PointGrid {
    min: Vec3,
    h: f64,
    dims: [i64; 3],
    start: Vec<u32>,
    items: Vec<u32>,
}

impl PointGrid {
    fn new(points: &[Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).max().max(1e-9);
        // Roughly two points per occupied cell for a surface-like distribution.
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as i64).clamp(1, 256);
        let h = extent / per_axis as f64 * 1.0000001;
        let dims = [0, 1, 2].map(|a| (((max[a] - min[a]) / h).floor() as i64 + 1).max(1));
        let ncell = (dims[0] * dims[1] * dims[2]) as usize;
        let cell = |p: &Vec3| -> usize {
            let c = [0, 1, 2].map(|a| (((p[a] - min[a]) / h).floor() as i64).clamp(0, dims[a] - 1));
            ((c[0] * dims[1] + c[1]) * dims[2] + c[2]) as usize
        };
        let mut start = vec![0u32; ncell + 1];
        for p in points {
            start[cell(p) + 1] += 1;
        }
        for c in 1..start.len() {
            start[c] += start[c - 1];
        }
        let mut cursor = start.clone();
        let mut items = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell(p);
            items[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        Self { min, h, dims, start, items }
    }

    fn coord(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| (((p[a] - self.min[a]) / self.h).floor() as i64).clamp(0, self.dims[a] - 1))
    }

    fn cell(&self, c: [i64; 3]) -> &[u32] {
        let f = ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize;
        &self.items[self.start[f] as usize..self.start[f + 1] as usize]
    }

    fn knn(&self, points: &[Vec3], i: usize, k: usize, cutoff: f64) -> Vec<(usize, f64)> {
        let p = points[i];
        let c = self.coord(&p);
        let max_shell = *self.dims.iter().max().unwrap();
        let mut found: Vec<(usize, f64)> = Vec::new();
        for s in 0..=max_shell {
            for dx in -s..=s {
                for dy in -s..=s {
                    for dz in -s..=s {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != s {
                            continue;
                        }
                        let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= self.dims[a]) {
                            continue;
                        }
                        for &j in self.cell(q) {
                            let j = j as usize;
                            if j == i {
                                continue;
                            }
                            let d = (points[j] - p).norm();
                            if d < cutoff {
                                found.push((j, d));
                            }
                        }
                    }
                }
            }
            // Unvisited points are at least `s * h` away.
            let bound = s as f64 * self.h;
            if bound >= cutoff {
                break;
            }
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                found.truncate(k);
                if found[k - 1].1 < bound {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.truncate(k);
        found
    }
}

/// Deterministic separation direction for exactly coincident centers; flips
/// sign when `i` and `j` swap.
fn jitter_direction(i: usize, j: usize) -> Vec3 {
    let (a, b, sign) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
    let h = crate::rng::splitmix64(((a as u64) << 32) ^ b as u64);
    let v = Vec3::new(
        (h & 0xffff) as f64 + 1.0,
        ((h >> 16) & 0xffff) as f64 + 1.0,
        ((h >> 32) & 0xffff) as f64 + 1.0,
    );
    v.normalize() * sign
}

fn accumulate_pairs(
    centers: &[Vec3],
    radius: f64,
    neighbors: &[Vec<(usize, f64)>],
) -> (f64, Vec<Vec3>) {
    let mut loss = 0.0;
    let mut grads = vec![Vec3::zeros(); centers.len()];
    for (i, list) in neighbors.iter().enumerate() {
        for &(j, dist) in list {
            let (u, d) = if dist == 0.0 {
                (jitter_direction(i, j) * COINCIDENT_JITTER, COINCIDENT_JITTER)
            } else {
                (centers[j] - centers[i], dist)
            };
            if d < MIN_DISTANCE {
                loss += radius / MIN_DISTANCE;
                continue;
            }
            loss += radius / d;
            // d/dc_i of r/|c_j - c_i| = r (c_j - c_i) / |c_j - c_i|^3.
            let g = u * (radius / (d * d * d));
            grads[i] += g;
            grads[j] -= g;
        }
    }
    (loss, grads)
}

/// `Σ_i Σ_{j∈kNN(i)} r·1(|c_j − c_i| < d)/|c_j − c_i|` with `d = d_factor·r`,
/// and its gradient with neighbor sets and indicators held fixed.
pub fn repulsion_loss(cloud: &SphereCloud, cfg: &RepulsionConfig) -> (f64, Vec<Vec3>) {
    let centers = cloud.centers();
    if centers.len() < 2 {
        return (0.0, vec![Vec3::zeros(); centers.len()]);
    }
    let cutoff = cfg.d_factor * cloud.radius();
    let neighbors = knn_within(centers, cfg.k, cutoff);
    accumulate_pairs(centers, cloud.radius(), &neighbors)
}

/// O(M²) reference for [`repulsion_loss`].
pub fn repulsion_loss_exhaustive(cloud: &SphereCloud, cfg: &RepulsionConfig) -> (f64, Vec<Vec3>) {
    let centers = cloud.centers();
    if centers.len() < 2 {
        return (0.0, vec![Vec3::zeros(); centers.len()]);
    }
    let cutoff = cfg.d_factor * cloud.radius();
    let neighbors: Vec<Vec<(usize, f64)>> = (0..centers.len())
        .map(|i| {
            let mut all: Vec<(usize, f64)> = (0..centers.len())
                .filter(|&j| j != i)
                .map(|j| (j, (centers[j] - centers[i]).norm()))
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(cfg.k);
            all.retain(|&(_, d)| d < cutoff);
            all
        })
        .collect();
    accumulate_pairs(centers, cloud.radius(), &neighbors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::analytic::{Scene, SceneNode};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> Scene {
        Scene::new(SceneNode::sphere(Vec3::zeros(), 1.0))
    }

    #[test]
    fn surface_loss_off_surface_center() {
        let cloud = SphereCloud::from_centers(vec![Vec3::new(2.0, 0.0, 0.0)], 0.1, 0);
        let (l, g) = surface_loss(&cloud, &unit_sphere()).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert!((g[0] - Vec3::x()).norm() < 1e-15);
    }

    #[test]
    fn surface_loss_on_surface_is_zero() {
        let cloud = SphereCloud::from_centers(vec![Vec3::new(0.0, 1.0, 0.0)], 0.1, 0);
        let (l, g) = surface_loss(&cloud, &unit_sphere()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g[0], Vec3::zeros());
    }

    #[test]
    fn two_center_repulsion_value() {
        let cloud = SphereCloud::from_centers(vec![Vec3::zeros(), Vec3::new(0.5, 0.0, 0.0)], 0.4, 0);
        let cfg = RepulsionConfig { k: 1, d_factor: 2.0, lambda: 1.0 };
        let (l, g) = repulsion_loss(&cloud, &cfg);
        // Both ordered pairs contribute 0.4 / 0.5.
        assert!((l - 1.6).abs() < 1e-12);
        assert!((g[0] + g[1]).norm() < 1e-12);
        assert!(g[0].x > 0.0);
    }

    #[test]
    fn far_centers_do_not_repel() {
        let cloud = SphereCloud::from_centers(vec![Vec3::zeros(), Vec3::new(0.9, 0.0, 0.0)], 0.4, 0);
        let (l, g) = repulsion_loss(&cloud, &RepulsionConfig { k: 1, d_factor: 2.0, lambda: 1.0 });
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == Vec3::zeros()));
    }

    fn random_cloud(seed: u64, m: usize, r: f64) -> SphereCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (0..m)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        SphereCloud::from_centers(c, r, 0)
    }

    #[test]
    fn grid_matches_exhaustive() {
        for seed in 0..10 {
            let cloud = random_cloud(seed, 50, 0.15);
            let cfg = RepulsionConfig { k: 10, d_factor: 2.0, lambda: 1.0 };
            let (l1, g1) = repulsion_loss(&cloud, &cfg);
            let (l2, g2) = repulsion_loss_exhaustive(&cloud, &cfg);
            assert_eq!(l1, l2);
            assert_eq!(g1, g2);
        }
        let big = random_cloud(99, 3000, 0.03);
        let cfg = RepulsionConfig::default();
        assert_eq!(repulsion_loss(&big, &cfg), repulsion_loss_exhaustive(&big, &cfg));
    }

    #[test]
    fn repulsion_gradient_matches_finite_differences() {
        let cloud = random_cloud(4, 40, 0.2);
        let cfg = RepulsionConfig { k: 5, d_factor: 2.0, lambda: 1.0 };
        let neighbors = knn_within(cloud.centers(), cfg.k, cfg.d_factor * cloud.radius());
        let (_, g) = accumulate_pairs(cloud.centers(), cloud.radius(), &neighbors);
        let h = 1e-5;
        for i in 0..cloud.len() {
            for a in 0..3 {
                let mut plus = cloud.centers().to_vec();
                plus[i][a] += h;
                let mut minus = cloud.centers().to_vec();
                minus[i][a] -= h;
                // Neighbor sets and indicators held fixed; distances recomputed.
                let recompute = |c: &[Vec3]| {
                    let nb: Vec<Vec<(usize, f64)>> = neighbors
                        .iter()
                        .enumerate()
                        .map(|(p, l)| l.iter().map(|&(q, _)| (q, (c[q] - c[p]).norm())).collect())
                        .collect();
                    accumulate_pairs(c, cloud.radius(), &nb).0
                };
                let fd = (recompute(&plus) - recompute(&minus)) / (2.0 * h);
                let rel = (fd - g[i][a]).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "{i} {a}: {fd} vs {}", g[i][a]);
            }
        }
    }

    #[test]
    fn repulsion_is_rotation_invariant() {
        let cloud = random_cloud(8, 200, 0.1);
        let cfg = RepulsionConfig::default();
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let rotated = SphereCloud::from_centers(cloud.centers().iter().map(|c| rot * c).collect(), 0.1, 0);
        let (l1, _) = repulsion_loss(&cloud, &cfg);
        let (l2, _) = repulsion_loss(&rotated, &cfg);
        assert!((l1 - l2).abs() < 1e-9 * l1.abs().max(1.0));
    }

    #[test]
    fn coincident_centers_are_separated() {
        let cloud = SphereCloud::from_centers(vec![Vec3::zeros(), Vec3::zeros()], 0.1, 0);
        let (l, g) = repulsion_loss(&cloud, &RepulsionConfig::default());
        assert!(l.is_finite() && l > 0.0);
        assert!(g[0].norm() > 0.0);
        assert!((g[0] + g[1]).norm() < 1e-6 * g[0].norm());
    }

    #[test]
    fn knn_handles_unbounded_cutoff() {
        let cloud = random_cloud(2, 500, 0.1);
        let nn = knn_within(cloud.centers(), 3, f64::INFINITY);
        for (i, list) in nn.iter().enumerate() {
            let mut all: Vec<(usize, f64)> = (0..cloud.len())
                .filter(|&j| j != i)
                .map(|j| (j, (cloud.centers()[j] - cloud.centers()[i]).norm()))
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(3);
            assert_eq!(list, &all);
        }
    }
}
