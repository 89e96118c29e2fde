//! Seeded, stream-addressable randomness.
//!
//! Every random draw in the project comes from a `StreamRng` identified by
//! `(seed, stream)`. Streams are derived from stable tags plus indices, so
//! data generation, weight init, noise draws and shuffles are independently
//! reproducible: replaying any one of them never requires replaying the
//! others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Counter-based generator: a ChaCha8 block cipher keyed by the seed,
/// positioned on an independent stream.
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        StreamRng { inner }
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.inner.gen_range(lo..hi)
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn uniform_i32(&mut self, lo: i32, hi: i32) -> i32 {
        self.inner.gen_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn fill_uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

/// FNV-1a over a tag string; stable across platforms and releases, unlike
/// `std::hash`.
pub fn stream_id(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stream for the i-th item of a tagged family (one stream per clip, per
/// training step, per parameter, ...).
pub fn indexed_stream(tag: &str, index: u64) -> u64 {
    stream_id(tag) ^ index.wrapping_mul(0x9e3779b97f4a7c15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Vec<f32> = StreamRng::new(7, 3).fill_normal(32);
        let b: Vec<f32> = StreamRng::new(7, 3).fill_normal(32);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent() {
        let a: Vec<f32> = StreamRng::new(7, 0).fill_normal(8);
        let b: Vec<f32> = StreamRng::new(7, 1).fill_normal(8);
        assert_ne!(a, b);
    }

    #[test]
    fn stream_ids_differ_by_tag() {
        assert_ne!(stream_id("init"), stream_id("noise"));
        assert_ne!(indexed_stream("clip", 0), indexed_stream("clip", 1));
    }
}
