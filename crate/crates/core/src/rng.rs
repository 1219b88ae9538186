//! Portable, seedable random stream.
//!
//! Every random draw in the crate goes through [`Rng`] so that experiments can be
//! replayed bit-for-bit from another language:
//!
//! * generator: xoshiro256\*\*, state filled from the `u64` seed with SplitMix64
//!   (the reference `seed_from_u64` seeding);
//! * `uniform()`: `(next_u64 >> 11) * 2^-53`, a double in `[0, 1)`;
//! * `normal()`: Box-Muller on two fresh uniforms, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`,
//!   the sine half is discarded so every normal costs exactly two `u64` draws;
//! * `below(n)`: `(next_u64 as u128 * n as u128) >> 64` (multiply-shift, no rejection).

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent stream for a sub-task (shuffling of one epoch, pair sampling, ...).
    ///
    /// The derived seed is `seed + (stream + 1) * 0x9E3779B97F4A7C15` (wrapping).
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Integer in `0..n`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
