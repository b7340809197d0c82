//! Pinhole cameras and synthetic multi-view datasets rendered from analytic scenes.
//!
//! Cameras follow the OpenCV convention: the camera looks along its +z axis,
//! +x points right in the image and +y points down.

use crate::field::{ImplicitSurface, Scene};
use crate::geometry::{Ray, Vec3};
use crate::render::Rgb;
use crate::rng::stream_seed;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Distance of the generated cameras from the origin.
pub const CAMERA_DISTANCE: f64 = 2.5;
pub const DEFAULT_FOV_DEG: f64 = 50.0;
/// Radius of the ball every scene fits in.
pub const SCENE_RADIUS: f64 = 1.0;

const AMBIENT: f64 = 0.3;
const DIFFUSE: f64 = 0.7;
const HIT_EPS: f64 = 1e-7;
const MAX_TRACE_STEPS: usize = 2000;
// Tracing bound is padded so objects touching the unit sphere are not clipped.
const TRACE_BOUND: f64 = SCENE_RADIUS * 1.001;

fn light_dir() -> Vec3 {
    Vec3::new(0.4, -0.5, 0.75).normalize()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rotation; columns are the camera axes in world space.
    pub rotation: Matrix3<f64>,
    pub position: Vec3,
}

impl Camera {
    /// Camera at `position` looking at `target`, with `up` giving the image's upward direction.
    pub fn look_at(position: Vec3, target: Vec3, up: Vec3, width: u32, height: u32, fov_deg: f64) -> Self {
        let forward = (target - position).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation: Matrix3::from_columns(&[right, down, forward]),
            position,
        }
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Dataset("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Dataset("image size must be positive".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        if !(err < 1e-9) || self.rotation.determinant() < 0.0 {
            return Err(Error::Dataset(format!("camera rotation is not a proper rotation (error {err:e})")));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unit world-space direction through image coordinates `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation * d).normalize()
    }

    /// Ray through the center of pixel `(px, py)`, clipped to the scene ball.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Option<Ray> {
        let d = self.direction(px as f64 + 0.5, py as f64 + 0.5);
        Ray::through_bounds(self.position, d, SCENE_RADIUS)
    }

    /// Image coordinates of a world point; `None` behind the camera.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64)> {
        let c = self.rotation.transpose() * (x - self.position);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// Pixel containing a world point, if it projects inside the frame.
    pub fn project_pixel(&self, x: &Vec3) -> Option<(u32, u32)> {
        let (u, v) = self.project(x)?;
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as u32, v as u32))
        } else {
            None
        }
    }
}

/// `n` cameras on a Fibonacci lattice of the radius-2.5 sphere, looking at the
/// origin. The seed only rotates the lattice about the vertical axis.
pub fn fibonacci_cameras(n: usize, width: u32, height: u32, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "camera-rig"));
    let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = offset + golden * k as f64;
            let pos = CAMERA_DISTANCE * Vec3::new(rho * phi.cos(), rho * phi.sin(), z);
            let up = if z.abs() > 0.99 { Vec3::y() } else { Vec3::z() };
            Camera::look_at(pos, Vec3::zeros(), up, width, height, DEFAULT_FOV_DEG)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major linear RGB in [0, 1].
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn get(&self, px: u32, py: u32) -> Rgb {
        self.pixels[(py * self.width + px) as usize]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width, self.height, |x, y| {
            let c = self.get(x, y);
            image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            pixels: img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// First hit of the ray with the scene by sphere tracing, if any.
pub fn sphere_trace(scene: &Scene, ray: &Ray) -> Option<f64> {
    let mut t = ray.t_near();
    for _ in 0..MAX_TRACE_STEPS {
        let d = scene.value(&ray.at(t));
        if d < HIT_EPS {
            return Some(t);
        }
        t += d;
        if t > ray.t_far() {
            return None;
        }
    }
    None
}

/// Ground-truth color of one pixel: Lambertian shading under a fixed light
/// plus ambient, white background.
pub fn shade_pixel(scene: &Scene, cam: &Camera, px: u32, py: u32) -> Rgb {
    let d = cam.direction(px as f64 + 0.5, py as f64 + 0.5);
    let Some(ray) = Ray::through_bounds(cam.position, d, TRACE_BOUND) else {
        return [1.0; 3];
    };
    match sphere_trace(scene, &ray) {
        None => [1.0; 3],
        Some(t) => {
            let p = ray.at(t);
            let n = scene.gradient(&p).normalize();
            let lambert = n.dot(&light_dir()).max(0.0);
            let a = scene.albedo(&p);
            a.map(|c| (c * (AMBIENT + DIFFUSE * lambert)).clamp(0.0, 1.0))
        }
    }
}

pub fn render_view(scene: &Scene, cam: &Camera) -> Image {
    let pixels: Vec<Rgb> = (0..cam.height)
        .into_par_iter()
        .flat_map_iter(|py| (0..cam.width).map(move |px| shade_pixel(scene, cam, px, py)))
        .collect();
    // Round-trip through 8 bits so in-memory and on-disk datasets agree.
    Image::from_rgb8(&Image { width: cam.width, height: cam.height, pixels }.to_rgb8())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasFile {
    cameras: Vec<Camera>,
    images: Vec<String>,
}

impl SceneDataset {
    pub fn generate(scene: Scene, views: usize, resolution: u32, seed: u64) -> Result<Self> {
        if views < 2 {
            return Err(Error::Dataset(format!("at least 2 views are required, got {views}")));
        }
        if resolution == 0 {
            return Err(Error::Dataset("resolution must be positive".into()));
        }
        scene.validate()?;
        let cameras = fibonacci_cameras(views, resolution, resolution, seed);
        let images = cameras.iter().map(|c| render_view(&scene, c)).collect();
        Ok(Self { scene, cameras, images })
    }

    pub fn n_pixels(&self) -> usize {
        self.cameras.iter().map(|c| c.n_pixels()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() {
            return Err(Error::Dataset(format!(
                "{} cameras but {} images",
                self.cameras.len(),
                self.images.len()
            )));
        }
        if self.cameras.is_empty() {
            return Err(Error::Dataset("dataset has no views".into()));
        }
        for (i, (c, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            c.validate()?;
            if c.width != img.width || c.height != img.height || img.pixels.len() != c.n_pixels() {
                return Err(Error::Dataset(format!("image {i} does not match its camera size")));
            }
        }
        Ok(())
    }

    /// Writes `images/view_NNN.png`, `cameras.json` and `scene.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        let mut names = Vec::with_capacity(self.images.len());
        for (i, img) in self.images.iter().enumerate() {
            let name = format!("images/view_{i:03}.png");
            img.save_png(&dir.join(&name))?;
            names.push(name);
        }
        let cams = CamerasFile { cameras: self.cameras.clone(), images: names };
        std::fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&cams)?)?;
        std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&self.scene)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cams: CamerasFile = serde_json::from_str(&std::fs::read_to_string(dir.join("cameras.json"))?)?;
        let scene = Scene::from_json(&std::fs::read_to_string(dir.join("scene.json"))?)?;
        let images = cams
            .images
            .iter()
            .map(|name| -> Result<Image> { Ok(Image::from_rgb8(&image::open(dir.join(name))?.to_rgb8())) })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self { scene, cameras: cams.cameras, images };
        ds.validate()?;
        Ok(ds)
    }
}
