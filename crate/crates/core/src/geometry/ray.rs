use super::{Interval, Vec3};
use crate::{Error, Result};

/// A ray `p(t) = origin + t * direction` restricted to `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    origin: Vec3,
    direction: Vec3,
    t_near: f64,
    t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if !origin.iter().all(|v| v.is_finite()) || !direction.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRay("non-finite origin or direction".into()));
        }
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRay(format!(
                "direction must be unit length (|v| = {})",
                direction.norm()
            )));
        }
        if !(t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
            return Err(Error::InvalidRay(format!(
                "bounds must satisfy 0 <= t_near < t_far (got [{t_near}, {t_far}])"
            )));
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    /// Builds the ray from `origin` along `direction` (normalized here) clipped to
    /// the sphere of `radius` around the world origin. `None` if the ray misses it.
    pub fn through_bounds(origin: Vec3, direction: Vec3, radius: f64) -> Option<Self> {
        let direction = direction.normalize();
        let (t0, t1) = sphere_roots(&origin, &direction, &Vec3::zeros(), radius)?;
        let t_near = t0.max(0.0);
        if t1 <= t_near {
            return None;
        }
        Ray::new(origin, direction, t_near, t1).ok()
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn t_near(&self) -> f64 {
        self.t_near
    }

    pub fn t_far(&self) -> f64 {
        self.t_far
    }

    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }

    /// The whole parameter range as a single interval.
    pub fn span(&self) -> Interval {
        Interval::new(self.t_near, self.t_far).expect("ray bounds are ordered")
    }
}

/// Roots of `|o + t v - c|^2 = r^2` for unit `v`, ordered, or `None` when the
/// discriminant is not strictly positive.
fn sphere_roots(origin: &Vec3, direction: &Vec3, center: &Vec3, radius: f64) -> Option<(f64, f64)> {
    let oc = origin - center;
    let b = direction.dot(&oc);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 || !disc.is_finite() {
        return None;
    }
    let sq = disc.sqrt();
    // q never vanishes here: disc > 0 rules out b = 0 together with sq = 0.
    let q = if b > 0.0 { -b - sq } else { -b + sq };
    let (r0, r1) = (q, c / q);
    Some(if r0 < r1 { (r0, r1) } else { (r1, r0) })
}

/// Parameter interval where `|p(t) - center| < radius`, clipped to the ray
/// bounds. Tangent rays and empty clips return `None`.
pub fn ray_sphere_intersect(ray: &Ray, center: &Vec3, radius: f64) -> Option<Interval> {
    let (t0, t1) = sphere_roots(&ray.origin, &ray.direction, center, radius)?;
    let s = t0.max(ray.t_near);
    let t = t1.min(ray.t_far);
    Interval::new(s, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x_ray() -> Ray {
        Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 0.0, 10.0).unwrap()
    }

    #[test]
    fn axis_aligned_unit_sphere() {
        let iv = ray_sphere_intersect(&x_ray(), &Vec3::zeros(), 1.0).unwrap();
        assert_eq!((iv.s(), iv.t()), (1.0, 3.0));
    }

    #[test]
    fn miss_and_tangent_return_none() {
        assert!(ray_sphere_intersect(&x_ray(), &Vec3::new(0.0, 5.0, 0.0), 1.0).is_none());
        assert!(ray_sphere_intersect(&x_ray(), &Vec3::new(0.0, 1.0, 0.0), 1.0).is_none());
    }

    #[test]
    fn clipped_to_ray_bounds() {
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 1.5, 2.5).unwrap();
        let iv = ray_sphere_intersect(&ray, &Vec3::zeros(), 1.0).unwrap();
        assert_eq!((iv.s(), iv.t()), (1.5, 2.5));
        let behind = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::x(), 3.5, 9.0).unwrap();
        assert!(ray_sphere_intersect(&behind, &Vec3::zeros(), 1.0).is_none());
    }

    #[test]
    fn rejects_invalid_rays() {
        assert!(Ray::new(Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), 0.0, 1.0).is_err());
        assert!(Ray::new(Vec3::zeros(), Vec3::x(), 1.0, 1.0).is_err());
        assert!(Ray::new(Vec3::zeros(), Vec3::x(), -0.5, 1.0).is_err());
    }

    /// Finds the boundary of `inside` on `[lo, hi]` where `inside(lo) != inside(hi)`.
    fn bisect(mut lo: f64, mut hi: f64, inside: impl Fn(f64) -> bool) -> f64 {
        let lo_in = inside(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if inside(mid) == lo_in {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn endpoints_match_bisection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 500 {
            let o = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if d.norm() < 1e-3 {
                continue;
            }
            let ray = Ray::new(o, d.normalize(), 0.0, 10.0).unwrap();
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let r = rng.random_range(0.05..1.0);
            let inside = |t: f64| (ray.at(t) - c).norm() < r;
            let Some(iv) = ray_sphere_intersect(&ray, &c, r) else {
                // the closest approach must then lie outside the sphere
                let t_star = (c - o).dot(&ray.direction()).clamp(0.0, 10.0);
                assert!(!inside(t_star) || (ray.at(t_star) - c).norm() > r - 1e-12);
                continue;
            };
            let mid = 0.5 * (iv.s() + iv.t());
            assert!(inside(mid));
            if iv.s() > 0.0 {
                let s = bisect(0.0, mid, inside);
                assert!((s - iv.s()).abs() < 1e-9, "start {s} vs {}", iv.s());
            }
            if iv.t() < 10.0 {
                let t = bisect(mid, 10.0, inside);
                assert!((t - iv.t()).abs() < 1e-9, "end {t} vs {}", iv.t());
            }
            checked += 1;
        }
    }
}
