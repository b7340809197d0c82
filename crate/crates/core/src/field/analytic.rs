//! Analytic signed distance scenes used as ground truth.

use super::ImplicitSurface;
use crate::geometry::Vec3;
use crate::{Error, Result};
use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

/// Blend width of the smooth union used by the built-in scenes.
pub const SMOOTH_UNION_K: f64 = 0.05;

const DEFAULT_ALBEDO: [f64; 3] = [0.8, 0.8, 0.8];

fn default_albedo() -> [f64; 3] {
    DEFAULT_ALBEDO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneNode {
    Sphere {
        center: Vec3,
        radius: f64,
        #[serde(default = "default_albedo")]
        albedo: [f64; 3],
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
        #[serde(default = "default_albedo")]
        albedo: [f64; 3],
    },
    /// Torus around the z axis.
    Torus {
        center: Vec3,
        major: f64,
        minor: f64,
        #[serde(default = "default_albedo")]
        albedo: [f64; 3],
    },
    Capsule {
        a: Vec3,
        b: Vec3,
        radius: f64,
        #[serde(default = "default_albedo")]
        albedo: [f64; 3],
    },
    /// Flat-capped cylinder from `a` to `b`.
    Rod {
        a: Vec3,
        b: Vec3,
        radius: f64,
        #[serde(default = "default_albedo")]
        albedo: [f64; 3],
    },
    Union {
        children: Vec<SceneNode>,
    },
    Intersection {
        children: Vec<SceneNode>,
    },
    SmoothUnion {
        children: Vec<SceneNode>,
        k: f64,
    },
    /// Child evaluated in a frame rotated by the axis-angle vector `rotation`
    /// and then translated.
    Transform {
        rotation: Vec3,
        translation: Vec3,
        child: Box<SceneNode>,
    },
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    value: f64,
    grad: Vec3,
    albedo: [f64; 3],
}

/// Exact distance to an axis-aligned box given per-axis signed offsets `q`
/// (`|p| - half`) and the gradient of each offset.
fn box_distance(q: &[f64], gq: &[Vec3]) -> (f64, Vec3) {
    let outside: f64 = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    if outside > 0.0 {
        let mut g = Vec3::zeros();
        for (v, gv) in q.iter().zip(gq) {
            g += gv * (v.max(0.0) / outside);
        }
        (outside, g)
    } else {
        let (mut best, mut axis) = (q[0], 0);
        for (a, &v) in q.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                axis = a;
            }
        }
        (best, gq[axis])
    }
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl SceneNode {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        SceneNode::Sphere {
            center,
            radius,
            albedo: DEFAULT_ALBEDO,
        }
    }

    pub fn torus(center: Vec3, major: f64, minor: f64) -> Self {
        SceneNode::Torus {
            center,
            major,
            minor,
            albedo: DEFAULT_ALBEDO,
        }
    }

    pub fn rod(a: Vec3, b: Vec3, radius: f64) -> Self {
        SceneNode::Rod {
            a,
            b,
            radius,
            albedo: DEFAULT_ALBEDO,
        }
    }

    pub fn capsule(a: Vec3, b: Vec3, radius: f64) -> Self {
        SceneNode::Capsule {
            a,
            b,
            radius,
            albedo: DEFAULT_ALBEDO,
        }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3) -> Self {
        SceneNode::Box {
            center,
            half_extents,
            albedo: DEFAULT_ALBEDO,
        }
    }

    pub fn with_albedo(mut self, rgb: [f64; 3]) -> Self {
        match &mut self {
            SceneNode::Sphere { albedo, .. }
            | SceneNode::Box { albedo, .. }
            | SceneNode::Torus { albedo, .. }
            | SceneNode::Capsule { albedo, .. }
            | SceneNode::Rod { albedo, .. } => *albedo = rgb,
            _ => {}
        }
        self
    }

    fn validate(&self, path: &str) -> Result<()> {
        let positive = |v: f64, field: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{path}.{field}"), "must be positive and finite"))
            }
        };
        match self {
            SceneNode::Sphere { radius, .. } => positive(*radius, "radius"),
            SceneNode::Box { half_extents, .. } => {
                (0..3).try_for_each(|a| positive(half_extents[a], "half_extents"))
            }
            SceneNode::Torus { major, minor, .. } => {
                positive(*major, "major")?;
                positive(*minor, "minor")
            }
            SceneNode::Capsule { a, b, radius, .. } | SceneNode::Rod { a, b, radius, .. } => {
                positive(*radius, "radius")?;
                if (b - a).norm() == 0.0 {
                    return Err(Error::config(format!("{path}.b"), "endpoints must differ"));
                }
                Ok(())
            }
            SceneNode::Union { children } | SceneNode::Intersection { children } => {
                if children.is_empty() {
                    return Err(Error::config(format!("{path}.children"), "must not be empty"));
                }
                children
                    .iter()
                    .enumerate()
                    .try_for_each(|(i, c)| c.validate(&format!("{path}.children[{i}]")))
            }
            SceneNode::SmoothUnion { children, k } => {
                positive(*k, "k")?;
                if children.is_empty() {
                    return Err(Error::config(format!("{path}.children"), "must not be empty"));
                }
                children
                    .iter()
                    .enumerate()
                    .try_for_each(|(i, c)| c.validate(&format!("{path}.children[{i}]")))
            }
            SceneNode::Transform { child, .. } => child.validate(&format!("{path}.child")),
        }
    }

    fn eval(&self, p: &Vec3) -> Sample {
        match self {
            SceneNode::Sphere { center, radius, albedo } => {
                let d = p - center;
                let n = d.norm();
                let grad = if n > 0.0 { d / n } else { Vec3::x() };
                Sample { value: n - radius, grad, albedo: *albedo }
            }
            SceneNode::Box { center, half_extents, albedo } => {
                let d = p - center;
                let q: Vec<f64> = (0..3).map(|a| d[a].abs() - half_extents[a]).collect();
                let gq: Vec<Vec3> = (0..3)
                    .map(|a| {
                        let mut g = Vec3::zeros();
                        g[a] = sign(d[a]);
                        g
                    })
                    .collect();
                let (value, grad) = box_distance(&q, &gq);
                Sample { value, grad, albedo: *albedo }
            }
            SceneNode::Torus { center, major, minor, albedo } => {
                let d = p - center;
                let rho = (d.x * d.x + d.y * d.y).sqrt();
                let radial = if rho > 0.0 {
                    Vec3::new(d.x / rho, d.y / rho, 0.0)
                } else {
                    Vec3::x()
                };
                let qx = rho - major;
                let qy = d.z;
                let qn = (qx * qx + qy * qy).sqrt();
                let grad = if qn > 0.0 {
                    (radial * qx + Vec3::z() * qy) / qn
                } else {
                    radial
                };
                Sample { value: qn - minor, grad, albedo: *albedo }
            }
            SceneNode::Capsule { a, b, radius, albedo } => {
                let ab = b - a;
                let h = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                let d = p - (a + ab * h);
                let n = d.norm();
                let grad = if n > 0.0 { d / n } else { ab.normalize().cross(&Vec3::x()).normalize() };
                Sample { value: n - radius, grad, albedo: *albedo }
            }
            SceneNode::Rod { a, b, radius, albedo } => {
                let axis = b - a;
                let len = axis.norm();
                let u = axis / len;
                let m = (a + b) * 0.5;
                let d = p - m;
                let along = d.dot(&u);
                let perp = d - u * along;
                let rho = perp.norm();
                let radial = if rho > 0.0 {
                    perp / rho
                } else {
                    let t = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                    (t - u * t.dot(&u)).normalize()
                };
                let q = [rho - radius, along.abs() - 0.5 * len];
                let gq = [radial, u * sign(along)];
                let (value, grad) = box_distance(&q, &gq);
                Sample { value, grad, albedo: *albedo }
            }
            SceneNode::Union { children } => children
                .iter()
                .map(|c| c.eval(p))
                .reduce(|x, y| if y.value < x.value { y } else { x })
                .expect("validated non-empty"),
            SceneNode::Intersection { children } => children
                .iter()
                .map(|c| c.eval(p))
                .reduce(|x, y| if y.value > x.value { y } else { x })
                .expect("validated non-empty"),
            SceneNode::SmoothUnion { children, k } => children
                .iter()
                .map(|c| c.eval(p))
                .reduce(|x, y| {
                    // Polynomial smooth minimum; d/dx = h, d/dy = 1 - h.
                    let h = (0.5 + 0.5 * (y.value - x.value) / k).clamp(0.0, 1.0);
                    let value = y.value * (1.0 - h) + x.value * h - k * h * (1.0 - h);
                    let grad = x.grad * h + y.grad * (1.0 - h);
                    let albedo = if x.value <= y.value { x.albedo } else { y.albedo };
                    Sample { value, grad, albedo }
                })
                .expect("validated non-empty"),
            SceneNode::Transform { rotation, translation, child } => {
                let r = Rotation3::new(*rotation);
                let local = r.inverse() * (p - translation);
                let s = child.eval(&local);
                Sample { grad: r * s.grad, ..s }
            }
        }
    }
}

/// A named analytic scene; the surface is the zero level set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub name: String,
    pub root: SceneNode,
}

pub const BUILTIN_SCENES: &[&str] = &["sphere", "unit-sphere", "torus", "torus-rod", "capsule-box"];

impl Scene {
    pub fn new(root: SceneNode) -> Self {
        Self {
            name: "custom".into(),
            root,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let root = match name {
            "sphere" => SceneNode::sphere(Vec3::zeros(), 0.6).with_albedo([0.8, 0.5, 0.3]),
            "unit-sphere" => SceneNode::sphere(Vec3::zeros(), 1.0),
            "torus" => SceneNode::torus(Vec3::zeros(), 0.5, 0.2).with_albedo([0.3, 0.6, 0.8]),
            "torus-rod" => SceneNode::SmoothUnion {
                children: vec![
                    SceneNode::torus(Vec3::zeros(), 0.5, 0.2).with_albedo([0.3, 0.6, 0.8]),
                    SceneNode::rod(Vec3::new(-0.6, 0.0, -0.6), Vec3::new(0.6, 0.0, 0.6), 0.03)
                        .with_albedo([0.9, 0.4, 0.2]),
                ],
                k: SMOOTH_UNION_K,
            },
            "capsule-box" => SceneNode::SmoothUnion {
                children: vec![
                    SceneNode::cuboid(Vec3::new(0.0, 0.0, -0.25), Vec3::new(0.4, 0.4, 0.2))
                        .with_albedo([0.7, 0.7, 0.3]),
                    SceneNode::capsule(Vec3::new(0.0, 0.0, -0.05), Vec3::new(0.0, 0.0, 0.6), 0.08)
                        .with_albedo([0.3, 0.7, 0.4]),
                ],
                k: SMOOTH_UNION_K,
            },
            other => return Err(Error::UnknownScene(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            root,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.root.validate("root")
    }

    pub fn albedo(&self, x: &Vec3) -> [f64; 3] {
        self.root.eval(x).albedo
    }
}

impl ImplicitSurface for Scene {
    fn level(&self) -> f64 {
        0.0
    }

    fn value(&self, x: &Vec3) -> f64 {
        self.root.eval(x).value
    }

    fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
        let s = self.root.eval(x);
        (s.value, s.grad)
    }
}
