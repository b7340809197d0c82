//! Triangle meshes, marching-cubes extraction and mesh export.

use crate::field::ImplicitSurface;
use crate::geometry::{Aabb, Vec3};
use crate::{Error, Result};
use marching_cubes::tables::{EDGE_TABLE, TRI_TABLE};
use rayon::prelude::*;
use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Dataset("triangle index out of range".into()));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Dataset("mesh has a non-finite vertex".into()));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    fn edge_counts(&self) -> HashMap<(u32, u32), u32> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// `V − E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let used: HashSet<u32> = self.triangles.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Edges used by exactly one triangle.
    pub fn boundary_edges(&self) -> usize {
        self.edge_counts().values().filter(|&&c| c == 1).count()
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Binary little-endian PLY with float32 vertices.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        )?;
        for v in &self.vertices {
            for c in v.iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
        for t in &self.triangles {
            w.write_all(&[3u8])?;
            for &i in t {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

// Cube corner offsets and edge endpoints in the table's convention.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Default extraction box.
pub fn unit_box() -> Aabb {
    Aabb { min: Vec3::repeat(-1.0), max: Vec3::repeat(1.0) }
}

/// Marching cubes of `f = level` over `[-1, 1]^3` with `resolution` cells per axis.
pub fn extract_mesh(f: &dyn ImplicitSurface, resolution: usize, level: f64) -> Result<TriangleMesh> {
    extract_mesh_in(f, resolution, level, &unit_box())
}

/// Marching cubes over an arbitrary box. Vertices on shared grid edges are
/// shared, so the mesh is closed wherever the level set stays inside the box.
pub fn extract_mesh_in(f: &dyn ImplicitSurface, resolution: usize, level: f64, bounds: &Aabb) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(Error::config("resolution", "must be at least 8"));
    }
    let n = resolution + 1;
    let step = (bounds.max - bounds.min) / resolution as f64;
    let point = |i: usize, j: usize, k: usize| {
        bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let flat = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    // Values slab by slab so each batch evaluation stays moderate.
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pts: Vec<Vec3> = (0..n * n).map(|jk| point(i, jk / n, jk % n)).collect();
            f.values(&pts)
        })
        .collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        let p = point(bad / (n * n), (bad / n) % n, bad % n);
        return Err(Error::non_finite(&p));
    }
    if values.iter().all(|&v| v < level) || values.iter().all(|&v| v >= level) {
        return Err(Error::EmptyLevelSet { level });
    }

    let mut vertices = Vec::new();
    let mut edge_vertex: HashMap<u64, u32> = HashMap::new();
    let mut triangles = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut cube = 0usize;
                let mut v = [0.0; 8];
                for c in 0..8 {
                    let (a, b, d) = corner(c);
                    v[c] = values[flat(a, b, d)];
                    if v[c] < level {
                        cube |= 1 << c;
                    }
                }
                if EDGE_TABLE[cube] == 0 {
                    continue;
                }
                let mut ids = [u32::MAX; 12];
                for e in 0..12 {
                    if EDGE_TABLE[cube] & (1 << e) == 0 {
                        continue;
                    }
                    let [c0, c1] = EDGES[e];
                    let (p0, p1) = (corner(c0), corner(c1));
                    let (lo, hi, a0, a1) = if flat(p0.0, p0.1, p0.2) < flat(p1.0, p1.1, p1.2) {
                        (p0, p1, v[c0], v[c1])
                    } else {
                        (p1, p0, v[c1], v[c0])
                    };
                    let axis = if hi.0 != lo.0 {
                        0
                    } else if hi.1 != lo.1 {
                        1
                    } else {
                        2
                    };
                    let key = flat(lo.0, lo.1, lo.2) as u64 * 3 + axis;
                    ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let t = ((level - a0) / (a1 - a0)).clamp(0.0, 1.0);
                        let x0 = point(lo.0, lo.1, lo.2);
                        let x1 = point(hi.0, hi.1, hi.2);
                        vertices.push(x0 + (x1 - x0) * t);
                        (vertices.len() - 1) as u32
                    });
                }
                let row = &TRI_TABLE[cube];
                for tri in row.chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // Table winding faces the low-value side; flip so normals point outward.
                    triangles.push([ids[tri[0] as usize], ids[tri[2] as usize], ids[tri[1] as usize]]);
                }
            }
        }
    }
    TriangleMesh::new(vertices, triangles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, Scene};

    #[test]
    fn sphere_vertices_lie_near_the_level_set() {
        let s = Scene::builtin("unit-sphere").unwrap();
        let res = 128;
        let m = extract_mesh(&s, res, 0.0).unwrap();
        let diag = 3f64.sqrt() * 2.0 / res as f64;
        for v in &m.vertices {
            assert!((v.norm() - 1.0).abs() < 2.0 * diag);
        }
        assert!(m.signed_volume() > 0.0);
        assert!((m.signed_volume() - 4.0 / 3.0 * std::f64::consts::PI).abs() < 0.01);
        assert_eq!(m.boundary_edges(), 0);
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn constant_field_has_no_surface() {
        let f = ConstantField { value: 1.0, level: 0.0 };
        assert!(matches!(extract_mesh(&f, 16, 0.0), Err(Error::EmptyLevelSet { .. })));
        assert!(extract_mesh(&f, 4, 0.0).is_err());
    }

    #[test]
    fn torus_has_genus_one() {
        let s = Scene::builtin("torus").unwrap();
        for res in [32, 64, 96] {
            let m = extract_mesh(&s, res, 0.0).unwrap();
            assert_eq!(m.boundary_edges(), 0);
            assert_eq!(m.euler_characteristic(), 0, "res {res}");
        }
    }

    #[test]
    fn vertices_satisfy_gradient_bound() {
        for name in ["torus", "torus-rod", "capsule-box"] {
            let s = Scene::builtin(name).unwrap();
            let res = 64;
            let diag = 3f64.sqrt() * 2.0 / res as f64;
            let m = extract_mesh(&s, res, 0.0).unwrap();
            for v in &m.vertices {
                let (f, g) = s.value_grad(v);
                assert!(f.abs() < g.norm() * diag, "{name}: {f}");
            }
        }
    }

    #[test]
    fn exports_are_readable() {
        let s = Scene::builtin("sphere").unwrap();
        let m = extract_mesh(&s, 16, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.write_obj(&dir.path().join("m.obj")).unwrap();
        m.write_ply(&dir.path().join("m.ply")).unwrap();
        let obj = std::fs::read_to_string(dir.path().join("m.obj")).unwrap();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), m.vertices.len());
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), m.triangles.len());
        let ply = std::fs::read(dir.path().join("m.ply")).unwrap();
        let header_end = ply.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(ply.len() - header_end, m.vertices.len() * 12 + m.triangles.len() * 13);
    }
}
