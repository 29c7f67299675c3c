//! Seeded random streams.
//!
//! All randomness in the crate flows from a single 64-bit seed through named
//! substreams ("data", "init.stem", "smoothgrad", ...). Each stream is an
//! independent ChaCha8 generator keyed by SHA-256(seed || name), so runs are
//! reproducible per purpose: consuming more draws from one stream never
//! shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::tensor::Element;

/// Deterministic generator for one named purpose.
pub type StreamRng = ChaCha8Rng;

/// Derive the generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal draw in the target precision.
///
/// Sampling happens in f64 so that f32 and f64 runs see the same underlying
/// sequence (up to rounding) and consume the stream identically.
pub fn normal<T: Element>(rng: &mut StreamRng, sigma: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::from_f64(z * sigma)
}

/// Uniform draw from `[lo, hi)` in the target precision.
pub fn uniform<T: Element>(rng: &mut StreamRng, lo: f64, hi: f64) -> T {
    let u: f64 = Uniform::new(lo, hi).sample(rng);
    T::from_f64(u)
}

pub fn normal_vec<T: Element>(rng: &mut StreamRng, n: usize, sigma: f64) -> Vec<T> {
    (0..n).map(|_| normal(rng, sigma)).collect()
}

pub fn uniform_vec<T: Element>(rng: &mut StreamRng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| uniform(rng, lo, hi)).collect()
}

/// Fisher-Yates shuffle of indices `0..n`, driven by the stream.
pub fn shuffled_indices(rng: &mut StreamRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
