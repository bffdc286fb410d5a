//! Seeded random number helpers.
//!
//! Everything that draws randomness in this crate goes through a
//! `ChaCha8Rng` created from a u64 seed, so a run is reproducible
//! bit-for-bit from its seed alone. The float helpers here avoid
//! distribution crates on purpose: the exact bit pattern of each draw
//! is part of the reproducibility contract.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a base seed and an index
/// (splitmix64 finalizer), so numbered work items get decorrelated
/// deterministic streams.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) using the top 53 bits of one u64.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    (rng.next_u64() >> 11) as f64 * SCALE
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Uniform integer in [0, n) by rejection, unbiased for any n > 0.
pub fn uniform_usize(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_usize: empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        items.swap(i, j);
    }
}

/// Poisson draw by inversion; fine for the small means used in event noise.
pub fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let limit = (-mean).exp();
    let mut k = 0u64;
    let mut p = 1.0;
    loop {
        p *= uniform01(rng);
        if p <= limit {
            return k;
        }
        k += 1;
        // With the desk-scale means (< 1 per pixel) this never trips; it
        // guards against a pathological mean turning into a spin loop.
        if k > 10_000 {
            return k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = rng_from_seed(7);
        let mut b = rng_from_seed(7);
        for _ in 0..100 {
            assert_eq!(uniform01(&mut a).to_bits(), uniform01(&mut b).to_bits());
        }
    }

    #[test]
    fn uniform01_in_range() {
        let mut rng = rng_from_seed(1);
        for _ in 0..10_000 {
            let v = uniform01(&mut rng);
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = rng_from_seed(3);
        let mut items: Vec<usize> = (0..50).collect();
        shuffle(&mut rng, &mut items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn poisson_zero_mean() {
        let mut rng = rng_from_seed(4);
        assert_eq!(poisson(&mut rng, 0.0), 0);
    }
}
