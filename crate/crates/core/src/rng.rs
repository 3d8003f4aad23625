//! Deterministic random streams.
//!
//! Every consumer owns an [`Rng`] identified by `(seed, stream)`. The generator is
//! ChaCha8 with the stream id as the ChaCha stream (nonce), so streams never overlap and
//! the draw sequence is fixed by the algorithm. The block position is exposed so that a
//! stream can be checkpointed and resumed exactly.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Well-known stream ids.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const INIT_GEN_T: u64 = 10;
    pub const INIT_GEN_C: u64 = 11;
    pub const INIT_DISC_T: u64 = 12;
    pub const INIT_DISC_C: u64 = 13;
    pub const PERCEPTUAL: u64 = 20;
    pub const TRAIN: u64 = 30;
    pub const SHUFFLE: u64 = 31;
    pub const PROBE: u64 = 32;
    pub const TRANSLATE: u64 = 40;
    pub const EVAL: u64 = 41;
    pub const PROXY_CLASSIFIER: u64 = 50;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Child stream keyed by an index, e.g. one per sample or per epoch.
    pub fn derive(seed: u64, stream: u64, index: u64) -> Self {
        Self::new(mix(seed, index), stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(s: RngState) -> Self {
        let mut r = Self::new(s.seed, s.stream);
        r.inner.set_word_pos(s.word_pos);
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// SplitMix64-style mixing of a seed with an index.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
