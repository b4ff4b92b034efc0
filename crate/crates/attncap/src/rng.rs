//! Deterministic, platform-independent randomness.
//!
//! Every random draw in the toolkit comes from a counter-based ChaCha8
//! stream seeded through [`mix`], so identical (seed, tag) pairs
//! reproduce bit-identically across platforms and across reruns. Uniform
//! and Gaussian sampling are implemented directly on the raw 64-bit
//! output to keep the sampling algorithm pinned.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Domain-separation tags for derived seeds.
pub mod tag {
    pub const FROZEN_WEIGHTS: u64 = 0x01;
    pub const TRAINABLE_WEIGHTS: u64 = 0x02;
    pub const LIBRARY: u64 = 0x03;
    pub const SHUFFLE: u64 = 0x04;
    pub const RESTART: u64 = 0x05;
    pub const TRIAL: u64 = 0x06;
    pub const DROPOUT: u64 = 0x07;
    pub const FIT_START: u64 = 0x08;
}

/// SplitMix64 finalizer; the standard 64-bit mixer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Derives an independent child seed from a base seed and a tag.
pub fn mix(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag))
}

/// Fresh ChaCha8 stream for a seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform f64 in [0, 1) with 53 bits of precision.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Unbiased uniform integer in [0, n) by rejection.
pub fn below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    assert!(n > 0, "below(0) is undefined");
    let zone = u64::MAX - u64::MAX % n;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % n;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// Fills `out` with N(0, std^2) draws via Box-Muller.
pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64], std: f64) {
    let mut i = 0;
    while i < out.len() {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = uniform(rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = std * radius * theta.cos();
        i += 1;
        if i < out.len() {
            out[i] = std * radius * theta.sin();
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(42);
        let mut b = stream(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn mix_separates_tags() {
        assert_ne!(mix(7, tag::LIBRARY), mix(7, tag::SHUFFLE));
        assert_ne!(mix(7, tag::LIBRARY), mix(8, tag::LIBRARY));
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = stream(1);
        for _ in 0..10_000 {
            assert!(below(&mut rng, 17) < 17);
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = stream(9);
        let mut buf = vec![0.0; 100_000];
        fill_normal(&mut rng, &mut buf, 2.0);
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        let var = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / buf.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn shuffle_permutes() {
        let mut rng = stream(3);
        let mut v: Vec<u32> = (0..100).collect();
        shuffle(&mut rng, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}
