//! Seeded, stream-indexed random number generation.
//!
//! One fixed counter-mode generator (ChaCha8) drives every stochastic
//! operation in the crate. A stream is identified by `(seed, stream)`;
//! distinct stream indices under the same seed yield independent sequences,
//! which is how replications, contamination draws, test sets, and fold
//! shuffles stay decoupled without global state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// A deterministic random stream: identical `(seed, stream)` produces the
/// identical sequence everywhere.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        // Expand (seed, stream) into a full 256-bit key so the mapping does
        // not depend on any particular stream API of the backend.
        let mut state = seed ^ stream.rotate_left(32) ^ 0xD1B54A32D192ED03;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        RngStream {
            rng: ChaCha8Rng::from_seed(key),
            seed,
            stream,
        }
    }

    /// A fresh stream under the same seed.
    pub fn fork(&self, stream: u64) -> RngStream {
        RngStream::new(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Normal draw with the given mean and variance.
    pub fn normal_mv(&mut self, mean: f64, variance: f64) -> f64 {
        mean + variance.sqrt() * self.normal()
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        self.rng.random_range(0..bound)
    }

    /// `k` distinct indices sampled without replacement from 0..n, ascending.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        // Partial Fisher-Yates over an index array.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut out = idx[..k].to_vec();
        out.sort_unstable();
        out
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
