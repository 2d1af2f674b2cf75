//! Labelled, splittable random streams.
//!
//! A stream is keyed by `(root_seed, label)`. Derivation is order independent:
//! asking for `"train/round/3/client/7"` yields the same sequence whether or
//! not any other stream was drawn from first.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_seed(root_seed: u64, label: &str) -> [u8; 32] {
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut root = root_seed;
    let mut state = splitmix64(&mut root) ^ h;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

/// A deterministic random stream owned by one logical task.
#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    label: String,
    inner: ChaCha8Rng,
}

/// Derives the stream for `label` under `root_seed`.
///
/// # Panics
///
/// Panics if `label` is empty.
pub fn derive_stream(root_seed: u64, label: &str) -> RngStream {
    assert!(!label.is_empty(), "stream label must be non-empty");
    RngStream {
        root_seed,
        label: label.to_owned(),
        inner: ChaCha8Rng::from_seed(stream_seed(root_seed, label)),
    }
}

impl RngStream {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    /// A child stream labelled `"{self.label}/{suffix}"`. Independent of how
    /// much of `self` has been consumed.
    pub fn child(&self, suffix: &str) -> RngStream {
        derive_stream(self.root_seed, &format!("{}/{}", self.label, suffix))
    }

    /// Uniform integer in `[0, n)`. Sampled through `u64` so results do not
    /// depend on the platform word size.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        assert!(n >= 1, "uniform_int needs n >= 1");
        self.inner.random_range(0..n)
    }

    pub fn uniform_index(&mut self, n: usize) -> usize {
        self.uniform_int(n as u64) as usize
    }

    /// Uniform real in `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `0..n`, uniformly, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.uniform_index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// `⌊count · ratio⌋` with a small tolerance so that products such as
/// `100 · 0.29` (28.999…) floor to the intended integer.
pub fn floor_fraction(count: usize, ratio: f64) -> usize {
    let x = count as f64 * ratio;
    (x + 1e-9).floor().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(s: &mut RngStream, n: usize) -> Vec<u64> {
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn same_seed_and_label_replays() {
        let mut a = derive_stream(42, "partition");
        let mut b = derive_stream(42, "partition");
        assert_eq!(draws(&mut a, 100), draws(&mut b, 100));
    }

    #[test]
    fn labels_and_roots_separate_streams() {
        let a = derive_stream(42, "a").next_u64();
        let b = derive_stream(42, "b").next_u64();
        assert_ne!(a, b);
        let mut x1 = derive_stream(1, "x");
        let mut x2 = derive_stream(2, "x");
        assert_ne!(draws(&mut x1, 8), draws(&mut x2, 8));
    }

    #[test]
    fn child_ignores_parent_consumption() {
        let mut parent = derive_stream(9, "noise");
        let fresh = parent.child("client/3").next_u64();
        let _ = draws(&mut parent, 17);
        assert_eq!(parent.child("client/3").next_u64(), fresh);
        assert_eq!(
            derive_stream(9, "noise/client/3").next_u64(),
            fresh,
            "child label is the joined path"
        );
    }

    #[test]
    fn uniform_int_stays_in_range() {
        let mut s = derive_stream(3, "range");
        for t in 0..100_000u64 {
            let n = 1 + t % 37;
            assert!(s.uniform_int(n) < n);
        }
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut s = derive_stream(5, "sample");
        let mut got = s.sample_indices(50, 20);
        got.sort_unstable();
        got.dedup();
        assert_eq!(got.len(), 20);
        assert!(got.iter().all(|&i| i < 50));
    }

    #[test]
    fn floor_fraction_absorbs_float_error() {
        assert_eq!(floor_fraction(100, 0.29), 29);
        assert_eq!(floor_fraction(10, 0.33), 3);
        assert_eq!(floor_fraction(7, 0.5), 3);
        assert_eq!(floor_fraction(100, 0.1), 10);
    }
}
