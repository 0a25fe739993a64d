//! Counter-based reproducible randomness.
//!
//! A stream is fully determined by `(seed, stream, counter)`; the counter is
//! the ChaCha word position, so any draw can be replayed by jumping to it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit id for a subsystem name ("train/noise", "sample/init", ...).
pub fn stream_id(name: &str) -> u64 {
    // FNV-1a, then mixed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(seed, stream, 0)
    }

    pub fn named(seed: u64, name: &str) -> Self {
        Self::new(seed, stream_id(name))
    }

    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(counter as u128);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Independent child stream; the parent is not advanced.
    pub fn fork(&self, index: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape, data).expect("shape product matches")
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Convenience: a fresh standard-normal tensor from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut RngStream) -> Tensor {
    rng.gaussian(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_shape() {
        let mut r = RngStream::new(1, 2);
        let t = gaussian(&[0], &mut r);
        assert!(t.is_empty());
        assert_eq!(t.shape(), &[0]);
    }

    #[test]
    fn replay_from_counter() {
        let mut a = RngStream::new(7, 3);
        let _ = a.gaussian(&[5]);
        let c = a.counter();
        let x = a.gaussian(&[17]);
        let mut b = RngStream::at(7, 3, c);
        let y = b.gaussian(&[17]);
        assert_eq!(x.data(), y.data());
        assert_eq!(a.counter(), b.counter());
    }

    #[test]
    fn streams_differ() {
        let x = RngStream::new(7, 1).gaussian(&[8]);
        let y = RngStream::new(7, 2).gaussian(&[8]);
        assert_ne!(x.data(), y.data());
        assert_ne!(stream_id("train/noise"), stream_id("train/t"));
    }

    #[test]
    fn moments_of_a_million_draws() {
        let mut r = RngStream::named(2024, "moments");
        let t = r.gaussian(&[1_000_000]);
        let m = t.mean();
        let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t.len() as f64;
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((v - 1.0).abs() < 0.01, "var {v}");
    }
}
