//! Seeded randomness helpers shared by the synthetic scene and the oracle
//! detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
#[inline]
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3u64, |acc, &w| splitmix64(acc ^ w))
}

/// ChaCha8 generator with the handful of range helpers the crate needs.
pub struct StdRng(ChaCha8Rng);

impl StdRng {
    pub fn seeded(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Generator for one (seed, stream) pair, independent of visit order.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        Self::seeded(hash_words(&[seed, stream]))
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }

    /// Uniform in `[lo, hi]` inclusive.
    pub fn range_u32(&mut self, lo: u32, hi: u32) -> u32 {
        self.0.random_range(lo..=hi)
    }

    pub fn range_i32(&mut self, lo: i32, hi: i32) -> i32 {
        self.0.random_range(lo..=hi)
    }

    /// Uniform in `[lo, hi)`; returns `lo` for an empty range.
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            self.0.random_range(lo..hi)
        }
    }

    pub fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.0.random::<f64>() < p
    }
}
