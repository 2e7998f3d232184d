//! Counter-based random number generation.
//!
//! Every random draw in the crate flows through [`CogoRng`], a ChaCha8 stream
//! cipher keyed by a `(seed, stream_id)` pair. Identical pairs produce
//! identical draw sequences on every platform, and independent stream ids give
//! statistically independent streams, so per-image work can run on any number
//! of workers without losing reproducibility.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone)]
pub struct CogoRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl CogoRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent stream from this one. The child's draw sequence
    /// does not depend on how much the parent has already been consumed.
    pub fn substream(&self, tag: u64) -> Self {
        // SplitMix64 finalizer keeps sibling streams far apart.
        let mut z = self
            .stream_id
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(tag)
            .wrapping_add(0x2545_f491_4f6c_dd1d);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Self::new(self.seed, z ^ (z >> 31))
    }

    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.inner.random::<f32>()
    }

    pub fn normal_f32(&mut self, mean: f32, std: f32) -> f32 {
        if std == 0.0 {
            return mean;
        }
        let dist = Normal::new(mean, std).expect("finite std");
        dist.sample(&mut self.inner)
    }

    /// Fill a buffer with N(mean, std) draws.
    pub fn fill_normal(&mut self, buf: &mut [f32], mean: f32, std: f32) {
        if std == 0.0 {
            buf.fill(mean);
            return;
        }
        let dist = Normal::new(mean, std).expect("finite std");
        for v in buf {
            *v = dist.sample(&mut self.inner);
        }
    }

    /// Fill a buffer with Uniform[lo, hi) draws.
    pub fn fill_uniform(&mut self, buf: &mut [f32], lo: f32, hi: f32) {
        let dist = Uniform::new(lo, hi).expect("lo < hi");
        for v in buf {
            *v = dist.sample(&mut self.inner);
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

impl RngCore for CogoRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest);
    }
}
