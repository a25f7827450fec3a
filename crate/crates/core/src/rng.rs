//! Counter-based SplitMix64 generator.
//!
//! The stream is fully determined by a 64-bit seed and a 64-bit counter, so
//! any implementation can reproduce it:
//!
//! ```text
//! GAMMA = 0x9E37_79B9_7F4A_7C15
//! mix(z):  z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//!          z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//!          z ^ (z >> 31)                       (wrapping arithmetic)
//! next():  counter += 1; mix(seed + counter * GAMMA)
//! fork(k): child seed = mix(seed ^ mix(k + GAMMA)), child counter = 0
//! uniform: (next() >> 11) * 2^-53              in [0, 1)
//! ```
//!
//! `next()` on a fresh generator is bit-identical to the reference SplitMix64
//! seeded with `seed`.

use core::f64::consts::PI;

use num_traits::Float;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    seed: u64,
    counter: u64,
}

impl SplitMix64 {
    pub const fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent child stream keyed by `key`. Does not advance `self`.
    pub const fn fork(&self, key: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(key.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire multiply-shift; the bias is below 2^-64 * n and irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller (one draw per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        Float::sqrt(-2.0 * Float::ln(u1)) * Float::cos(2.0 * PI * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_splitmix64() {
        // Reference values of SplitMix64 seeded with 1234567.
        let mut r = SplitMix64::new(1234567);
        let expected = [
            6457827717110365317u64,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ];
        for e in expected {
            assert_eq!(r.next_u64(), e);
        }
    }

    #[test]
    fn forks_are_reproducible_and_distinct() {
        let root = SplitMix64::new(7);
        let mut a = root.fork(3);
        let mut b = root.fork(3);
        let mut c = root.fork(4);
        let xa = a.next_u64();
        assert_eq!(xa, b.next_u64());
        assert_ne!(xa, c.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval_and_below_in_range() {
        let mut r = SplitMix64::new(0);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(5) < 5);
        }
    }
}
