//! Deterministic random source.
//!
//! Every stochastic step in the pipeline (splits, weight init, synthetic
//! scenes) draws from [`SeededRng`], a ChaCha8 counter-based generator.
//! The same seed yields the same stream on every platform, and the state
//! round-trips exactly through `(seed, word_pos)` for checkpointing.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream for a named purpose, derived from the base seed
    /// alone (not from the current position), so derivation order never
    /// affects the child stream. SplitMix64 finalizer mixes seed and tag.
    pub fn derive(&self, tag: u64) -> SeededRng {
        let mut z = self.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        SeededRng::new(z)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(seed, word_pos)` pair that reconstructs this exact state.
    pub fn state(&self) -> (u64, u128) {
        (self.seed, self.inner.get_word_pos())
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_word_pos(word_pos);
        SeededRng { seed, inner }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        use rand::seq::SliceRandom;
        xs.shuffle(&mut self.inner);
    }
}

/// Stream tags for [`SeededRng::derive`]; keeping them in one place avoids
/// accidental collisions between pipeline stages.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const SYNTH: u64 = 3;
    pub const UNLABELED: u64 = 4;
}
