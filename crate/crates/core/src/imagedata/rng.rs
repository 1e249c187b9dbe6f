//! Splittable random streams.
//!
//! Every stream is keyed by a 256-bit key. A child stream's key is the SHA-256
//! of the parent key and a label, so children never depend on how many draws
//! were taken from the parent or from any sibling.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// One component of a derivation label, e.g. `("batch", 3, "spatial")`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelPart {
    Str(String),
    Int(u64),
}

impl From<&str> for LabelPart {
    fn from(s: &str) -> Self {
        LabelPart::Str(s.to_owned())
    }
}

impl From<u64> for LabelPart {
    fn from(v: u64) -> Self {
        LabelPart::Int(v)
    }
}

impl From<usize> for LabelPart {
    fn from(v: usize) -> Self {
        LabelPart::Int(v as u64)
    }
}

impl From<u32> for LabelPart {
    fn from(v: u32) -> Self {
        LabelPart::Int(v as u64)
    }
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    key: [u8; 32],
    stream: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"pwself-rng");
        h.update(seed.to_le_bytes());
        Self::from_key(seed, h.finalize().into())
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        Self {
            seed,
            key,
            stream: ChaCha8Rng::from_seed(key),
        }
    }

    /// The root seed this stream (or its ancestors) was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `label`. Depends only on this stream's key and the label.
    pub fn derive(&self, label: &[LabelPart]) -> Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        for part in label {
            // tag + length prefix keeps ("ab","c") distinct from ("a","bc")
            match part {
                LabelPart::Str(s) => {
                    h.update([0u8]);
                    h.update((s.len() as u64).to_le_bytes());
                    h.update(s.as_bytes());
                }
                LabelPart::Int(v) => {
                    h.update([1u8]);
                    h.update(v.to_le_bytes());
                }
            }
        }
        Self::from_key(self.seed, h.finalize().into())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.stream.random::<f64>()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.stream.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.stream)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.uniform() < p
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.stream.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.stream.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(mut r: Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| r.next_u64()).collect()
    }

    #[test]
    fn same_label_same_stream() {
        let root = Rng::new(7);
        let a = root.derive(&["batch".into(), 3usize.into()]);
        let b = root.derive(&["batch".into(), 3usize.into()]);
        assert_eq!(draws(a, 100), draws(b, 100));
    }

    #[test]
    fn labels_separate_streams() {
        let root = Rng::new(7);
        let spatial = root.derive(&["batch".into(), 0usize.into(), "spatial".into()]);
        let photo = root.derive(&["batch".into(), 0usize.into(), "photo".into()]);
        assert_ne!(draws(spatial, 16), draws(photo, 16));
        let ab = root.derive(&["ab".into(), "c".into()]);
        let a_bc = root.derive(&["a".into(), "bc".into()]);
        assert_ne!(draws(ab, 4), draws(a_bc, 4));
    }

    #[test]
    fn child_ignores_parent_draw_position() {
        let mut root = Rng::new(11);
        let before = root.derive(&["x".into()]);
        for _ in 0..1000 {
            root.next_u64();
        }
        let after = root.derive(&["x".into()]);
        assert_eq!(draws(before, 32), draws(after, 32));
    }

    #[test]
    fn uniform_mean_is_half() {
        let mut r = Rng::new(2024);
        let n = 1_000_000;
        let mean = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = Rng::new(3).permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
