use super::{CenterOptimizer, SphereCloud};
use crate::checkpoint::{write_atomic, Decoder, Encoder};
use crate::geometry::Vec3;
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SGCLOUD\0";
const VERSION: u32 = 1;

fn put_vecs(e: &mut Encoder, v: &[Vec3]) {
    let flat: Vec<f64> = v.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
    e.f64s(&flat);
}

fn get_vecs(d: &mut Decoder) -> Result<Vec<Vec3>> {
    let flat = d.f64s()?;
    if flat.len() % 3 != 0 {
        return Err(d.err("vector array length not divisible by 3"));
    }
    Ok(flat.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

impl SphereCloud {
    pub fn to_bytes(&self, opt: &CenterOptimizer) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        put_vecs(&mut e, &self.centers);
        e.f64(self.radius);
        e.u64(self.iteration);
        e.u64(self.version);
        e.bytes(&self.rng.get_seed());
        e.u64(self.rng.get_stream());
        let wp = self.rng.get_word_pos();
        e.u64(wp as u64);
        e.u64((wp >> 64) as u64);
        e.f64(opt.lr);
        e.f64(opt.cfg.beta1);
        e.f64(opt.cfg.beta2);
        e.f64(opt.cfg.eps);
        put_vecs(&mut e, &opt.m);
        put_vecs(&mut e, &opt.v);
        e.u64(opt.steps.len() as u64);
        for s in &opt.steps {
            e.u64(*s);
        }
        e.finish()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<(Self, CenterOptimizer)> {
        let mut d = Decoder::new(data, path, MAGIC, VERSION)?;
        let centers = get_vecs(&mut d)?;
        let radius = d.f64()?;
        let iteration = d.u64()?;
        let version = d.u64()?;
        let seed: [u8; 32] = d.bytes()?.try_into().map_err(|_| d.err("rng seed must be 32 bytes"))?;
        let stream = d.u64()?;
        let lo = d.u64()? as u128;
        let hi = d.u64()? as u128;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(lo | (hi << 64));
        let mut opt = CenterOptimizer::new(centers.len(), d.f64()?);
        opt.cfg.beta1 = d.f64()?;
        opt.cfg.beta2 = d.f64()?;
        opt.cfg.eps = d.f64()?;
        opt.m = get_vecs(&mut d)?;
        opt.v = get_vecs(&mut d)?;
        let n = d.u64()? as usize;
        if n != centers.len() || opt.m.len() != n || opt.v.len() != n {
            return Err(d.err("optimizer state does not match the number of centers"));
        }
        opt.steps = (0..n).map(|_| d.u64()).collect::<Result<_>>()?;
        d.finish()?;
        let cloud = Self {
            centers,
            radius,
            iteration,
            rng,
            version,
        };
        Ok((cloud, opt))
    }

    pub fn save(&self, opt: &CenterOptimizer, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes(opt))
    }

    pub fn load(path: &Path) -> Result<(Self, CenterOptimizer)> {
        let data = std::fs::read(path)?;
        Self::from_bytes(&data, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cloud = SphereCloud::init(37, 9, 0.4);
        cloud.rng().next_u64();
        cloud.set_iteration(12);
        let mut opt = CenterOptimizer::new(37, 1e-3);
        opt.m[3] = Vec3::new(0.1, -2.0, 1e-300);
        opt.steps[5] = 44;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cloud.ckpt");
        cloud.save(&opt, &p).unwrap();
        let (mut back, bopt) = SphereCloud::load(&p).unwrap();
        assert_eq!(back, cloud);
        assert_eq!(bopt, opt);
        assert_eq!(back.rng().next_u64(), cloud.rng().next_u64());
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let cloud = SphereCloud::init(3, 1, 0.4);
        let opt = CenterOptimizer::new(3, 1e-3);
        let bytes = cloud.to_bytes(&opt);
        let p = Path::new("x");
        assert!(SphereCloud::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SphereCloud::from_bytes(&bad, p).is_err());
    }
}
