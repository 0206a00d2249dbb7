//! Seeded randomness for initialization, sampling and schedule draws.
//!
//! All stochastic tensors are generated on the host from a ChaCha stream so
//! that runs are reproducible and the generator state can be checkpointed
//! exactly.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct TrainRng {
    rng: ChaCha8Rng,
}

impl TrainRng {
    pub fn seed_from(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Standard normal draws (Box-Muller over the ChaCha stream).
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = self.rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            out.push(r * th.cos());
            if out.len() < n {
                out.push(r * th.sin());
            }
        }
        out
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn normal_tensor(
        &mut self,
        shape: &[usize],
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = self.normal_vec(n);
        Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
    }

    /// Serializable state: seed plus stream position.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 16);
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 48 {
            return None;
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let pos = u128::from_le_bytes(bytes[32..48].try_into().ok()?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Some(Self { rng })
    }

    pub fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_roundtrip_continues_stream() {
        let mut a = TrainRng::seed_from(17);
        let _ = a.normal_vec(37);
        let state = a.state_bytes();
        let mut b = TrainRng::from_state_bytes(&state).unwrap();
        assert_eq!(a.normal_vec(16), b.normal_vec(16));
        assert_eq!(a.uniform(), b.uniform());
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = TrainRng::seed_from(3);
        let v = rng.normal_vec(200_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn deterministic_tensors() {
        let dev = Device::Cpu;
        let a = TrainRng::seed_from(5).normal_tensor(&[3, 4], DType::F64, &dev).unwrap();
        let b = TrainRng::seed_from(5).normal_tensor(&[3, 4], DType::F64, &dev).unwrap();
        let (a, b) = (a.flatten_all().unwrap(), b.flatten_all().unwrap());
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
    }
}
