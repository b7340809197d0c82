use super::{interval_union, ray_sphere_intersect, IntervalSet, Ray, Vec3};
use crate::sphere_cloud::SphereCloud;
use crate::{Error, Result};

/// Padding applied to sphere bounding boxes on registration so that rounding in
/// the grid walk can never drop a candidate.
const REGISTRATION_PAD: f64 = 1e-7;

/// Upper bound on the number of grid cells; the cell size grows past the sphere
/// radius only if this would be exceeded.
const MAX_CELLS: usize = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Slab test: parameter range of `ray` inside the box, clipped to the ray bounds.
    fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (ray.t_near(), ray.t_far());
        let o = ray.origin();
        let d = ray.direction();
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let mut t0 = (self.min[a] - o[a]) * inv;
            let mut t1 = (self.max[a] - o[a]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            lo = lo.max(t0);
            hi = hi.min(t1);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}

/// Uniform grid over the cloud's bounding box. Each sphere is registered in
/// every cell its (padded) bounding box overlaps, stored in CSR layout.
#[derive(Debug, Clone)]
pub struct SphereIndex {
    cell_size: f64,
    bounds: Aabb,
    dims: [usize; 3],
    cell_start: Vec<u32>,
    entries: Vec<u32>,
    radius: f64,
    version: u64,
}

impl SphereIndex {
    pub fn build(cloud: &SphereCloud) -> Self {
        let radius = cloud.radius();
        let centers = cloud.centers();
        let reach = radius + REGISTRATION_PAD;
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for c in centers {
            min = min.inf(&(c - Vec3::repeat(reach)));
            max = max.sup(&(c + Vec3::repeat(reach)));
        }
        if centers.is_empty() {
            min = Vec3::zeros();
            max = Vec3::zeros();
        }
        let extent = max - min;
        let mut cell_size = radius;
        let dims_for = |h: f64| -> [usize; 3] {
            [0, 1, 2].map(|a| ((extent[a] / h).ceil() as usize).max(1))
        };
        let mut dims = dims_for(cell_size);
        while dims.iter().product::<usize>() > MAX_CELLS {
            cell_size *= 1.25;
            dims = dims_for(cell_size);
        }

        let cell_of = |v: f64, a: usize| -> usize {
            (((v - min[a]) / cell_size).floor().max(0.0) as usize).min(dims[a] - 1)
        };
        let flat = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;

        let n_cells = dims.iter().product::<usize>();
        let mut counts = vec![0u32; n_cells + 1];
        let ranges: Vec<[(usize, usize); 3]> = centers
            .iter()
            .map(|c| [0, 1, 2].map(|a| (cell_of(c[a] - reach, a), cell_of(c[a] + reach, a))))
            .collect();
        for r in &ranges {
            for i in r[0].0..=r[0].1 {
                for j in r[1].0..=r[1].1 {
                    for k in r[2].0..=r[2].1 {
                        counts[flat(i, j, k) + 1] += 1;
                    }
                }
            }
        }
        for c in 1..counts.len() {
            counts[c] += counts[c - 1];
        }
        let mut cursor = counts.clone();
        let mut entries = vec![0u32; counts[n_cells] as usize];
        for (s, r) in ranges.iter().enumerate() {
            for i in r[0].0..=r[0].1 {
                for j in r[1].0..=r[1].1 {
                    for k in r[2].0..=r[2].1 {
                        let cell = flat(i, j, k);
                        entries[cursor[cell] as usize] = s as u32;
                        cursor[cell] += 1;
                    }
                }
            }
        }

        Self {
            cell_size,
            bounds: Aabb { min, max },
            dims,
            cell_start: counts,
            entries,
            radius,
            version: cloud.version(),
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Fails with `StaleIndex` unless the index was built for this cloud state.
    pub fn check(&self, cloud: &SphereCloud) -> Result<()> {
        if self.radius != cloud.radius() || self.version != cloud.version() {
            return Err(Error::StaleIndex {
                index_radius: self.radius,
                cloud_radius: cloud.radius(),
            });
        }
        Ok(())
    }

    fn cell_entries(&self, cell: [usize; 3]) -> &[u32] {
        let flat = (cell[0] * self.dims[1] + cell[1]) * self.dims[2] + cell[2];
        &self.entries[self.cell_start[flat] as usize..self.cell_start[flat + 1] as usize]
    }

    fn cell_coord(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds.min[a]) / self.cell_size;
            if !(u >= 0.0) || u >= self.dims[a] as f64 {
                return None;
            }
            cell[a] = u as usize;
        }
        Some(cell)
    }

    /// Spheres whose bounding box contains `p` (a superset of those containing it).
    pub fn query_point(&self, p: &Vec3) -> &[u32] {
        match self.cell_coord(p) {
            Some(cell) => self.cell_entries(cell),
            None => &[],
        }
    }

    /// Sorted, deduplicated indices of spheres registered in any cell the ray
    /// passes through (3D DDA walk).
    pub fn ray_candidates(&self, ray: &Ray) -> Vec<u32> {
        let mut out = Vec::new();
        let Some((t0, t1)) = self.bounds.clip(ray) else {
            return out;
        };
        let o = ray.origin();
        let d = ray.direction();
        let start = ray.at(t0);
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let u = ((start[a] - self.bounds.min[a]) / self.cell_size).floor();
            cell[a] = (u as i64).clamp(0, self.dims[a] as i64 - 1);
            if d[a] > 0.0 {
                step[a] = 1;
                let boundary = self.bounds.min[a] + (cell[a] + 1) as f64 * self.cell_size;
                t_max[a] = (boundary - o[a]) / d[a];
                t_delta[a] = self.cell_size / d[a];
            } else if d[a] < 0.0 {
                step[a] = -1;
                let boundary = self.bounds.min[a] + cell[a] as f64 * self.cell_size;
                t_max[a] = (boundary - o[a]) / d[a];
                t_delta[a] = -self.cell_size / d[a];
            }
        }
        loop {
            out.extend_from_slice(self.cell_entries([cell[0] as usize, cell[1] as usize, cell[2] as usize]));
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[a] > t1 {
                break;
            }
            cell[a] += step[a];
            if cell[a] < 0 || cell[a] >= self.dims[a] as i64 {
                break;
            }
            t_max[a] += t_delta[a];
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Minimal interval cover of the ray's intersection with every sphere of the
/// cloud. The index only prunes candidates; the result equals the exhaustive loop.
pub fn cloud_intervals(ray: &Ray, cloud: &SphereCloud, index: &SphereIndex) -> Result<IntervalSet> {
    index.check(cloud)?;
    let centers = cloud.centers();
    let r = cloud.radius();
    let candidates = index.ray_candidates(ray);
    Ok(interval_union(
        candidates
            .iter()
            .filter_map(|&i| ray_sphere_intersect(ray, &centers[i as usize], r)),
    ))
}

/// Reference O(M) version of [`cloud_intervals`].
pub fn cloud_intervals_exhaustive(ray: &Ray, cloud: &SphereCloud) -> IntervalSet {
    let r = cloud.radius();
    interval_union(cloud.centers().iter().filter_map(|c| ray_sphere_intersect(ray, c, r)))
}

/// True iff some sphere strictly contains `x`.
pub fn point_in_cloud(x: &Vec3, cloud: &SphereCloud, index: &SphereIndex) -> Result<bool> {
    index.check(cloud)?;
    let r2 = cloud.radius() * cloud.radius();
    let centers = cloud.centers();
    Ok(index
        .query_point(x)
        .iter()
        .any(|&i| (x - centers[i as usize]).norm_squared() < r2))
}

pub fn point_in_cloud_exhaustive(x: &Vec3, cloud: &SphereCloud) -> bool {
    let r2 = cloud.radius() * cloud.radius();
    cloud.centers().iter().any(|c| (x - c).norm_squared() < r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, m: usize, radius: f64) -> SphereCloud {
        let centers = (0..m)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        SphereCloud::from_centers(centers, radius, 0)
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
        let o = random_unit(rng) * 2.5;
        let target = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
        Ray::new(o, (target - o).normalize(), 0.0, 5.0).unwrap()
    }

    #[test]
    fn single_sphere_matches_direct_intersection() {
        let cloud = SphereCloud::from_centers(vec![Vec3::zeros()], 1.0, 0);
        let index = SphereIndex::build(&cloud);
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 0.0, 10.0).unwrap();
        let set = cloud_intervals(&ray, &cloud, &index).unwrap();
        let direct = ray_sphere_intersect(&ray, &Vec3::zeros(), 1.0).unwrap();
        assert_eq!(set.segments(), &[direct]);
    }

    #[test]
    fn missing_ray_gives_empty_set() {
        let cloud = SphereCloud::from_centers(vec![Vec3::zeros(), Vec3::new(0.3, 0.0, 0.0)], 0.1, 0);
        let index = SphereIndex::build(&cloud);
        let ray = Ray::new(Vec3::new(-2.0, 2.0, 0.0), Vec3::x(), 0.0, 10.0).unwrap();
        assert!(cloud_intervals(&ray, &cloud, &index).unwrap().is_empty());
    }

    #[test]
    fn indexed_equals_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let radius = [0.04, 0.1, 0.4][trial % 3];
            let cloud = random_cloud(&mut rng, 100, radius);
            let index = SphereIndex::build(&cloud);
            for _ in 0..200 {
                let ray = random_ray(&mut rng);
                assert_eq!(
                    cloud_intervals(&ray, &cloud, &index).unwrap(),
                    cloud_intervals_exhaustive(&ray, &cloud)
                );
            }
        }
    }

    #[test]
    fn point_queries_match_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 300, 0.08);
        let index = SphereIndex::build(&cloud);
        for c in cloud.centers() {
            assert!(point_in_cloud(c, &cloud, &index).unwrap());
        }
        for _ in 0..10_000 {
            let x = Vec3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2));
            assert_eq!(point_in_cloud(&x, &cloud, &index).unwrap(), point_in_cloud_exhaustive(&x, &cloud));
        }
    }

    #[test]
    fn point_just_outside_unique_sphere() {
        let cloud = SphereCloud::from_centers(vec![Vec3::new(0.2, 0.1, 0.0)], 0.3, 0);
        let index = SphereIndex::build(&cloud);
        let x = Vec3::new(0.2 + 0.31, 0.1, 0.0);
        assert!(!point_in_cloud(&x, &cloud, &index).unwrap());
    }

    #[test]
    fn stale_index_is_rejected() {
        let mut cloud = SphereCloud::from_centers(vec![Vec3::zeros()], 0.4, 0);
        let index = SphereIndex::build(&cloud);
        cloud.set_radius(0.2);
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 0.0, 10.0).unwrap();
        assert!(matches!(cloud_intervals(&ray, &cloud, &index), Err(Error::StaleIndex { .. })));
        assert!(point_in_cloud(&Vec3::zeros(), &cloud, &index).is_err());
    }

    #[test]
    fn interval_members_are_in_cloud_and_gaps_are_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cloud = random_cloud(&mut rng, 60, 0.1);
        let index = SphereIndex::build(&cloud);
        for _ in 0..100 {
            let ray = random_ray(&mut rng);
            let set = cloud_intervals(&ray, &cloud, &index).unwrap();
            for seg in set.segments() {
                for _ in 0..1000 {
                    let t = rng.random_range(seg.s() + super::super::MERGE_EPS..seg.t() - super::super::MERGE_EPS);
                    assert!(point_in_cloud(&ray.at(t), &cloud, &index).unwrap());
                }
            }
            for t in set.gap_midpoints() {
                assert!(!point_in_cloud(&ray.at(t), &cloud, &index).unwrap());
            }
        }
    }
}
