//! Seeded random streams.
//!
//! Every draw goes through SplitMix64 with explicit conversions so fixtures
//! can be regenerated bit-for-bit by any implementation:
//!
//! * stream `i` of seed `s`: let `d` be the first output of SplitMix64 seeded
//!   with `s + i·0x9E3779B97F4A7C15` (wrapping); the stream is SplitMix64
//!   seeded with `d`.
//! * `uniform()`: `(next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`.
//! * `range(lo, hi)`: `lo + (hi - lo)·uniform()`.
//! * `int_inclusive(lo, hi)`: `lo + ⌊uniform()·(hi - lo + 1)⌋`.
//! * `normal()`: Box-Muller cosine branch on `u1 = 1 - uniform()`,
//!   `u2 = uniform()`, one variate per two uniforms.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream for item `index` (e.g. an image) under `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        let derived = SplitMix64::seed_from_u64(seed.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA))).next_u64();
        Self::new(derived)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn int_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as f64;
        lo + ((self.uniform() * span) as u64).min(hi - lo)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson draw by multiplying uniforms (Knuth); fine for small means.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0;
        let mut p = self.uniform();
        while p > limit {
            k += 1;
            p *= self.uniform();
        }
        k
    }

    pub fn sign(&mut self) -> f64 {
        if self.uniform() < 0.5 {
            -1.0
        } else {
            1.0
        }
    }
}
