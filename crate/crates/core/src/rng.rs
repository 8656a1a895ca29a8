//! Seeded pseudo-random generator shared by every stochastic step.
//!
//! The generator is xoshiro256** whose 256-bit state is filled from the
//! 64-bit seed with SplitMix64. Floats are drawn as the top 53 bits of a
//! 64-bit output scaled by 2^-53, and bounded integers as
//! `floor(float * n)`. Both conversions are fixed here so that another
//! implementation can replay the same stream from the same seed.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256StarStar,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }
}
