//! Seeded randomness shared by every stochastic component.
//!
//! All generators are ChaCha8 seeded with the 32-byte key whose first eight
//! bytes are the little-endian seed and whose remaining bytes are zero.
//! Uniform floats take the top 24 bits of `next_u32`, which keeps the stream
//! reproducible from any language with a ChaCha8 implementation.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform sample in `[0, 1)`.
pub fn unit_f32(rng: &mut impl RngCore) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

/// Uniform sample in `[-scale, scale)`.
pub fn symmetric_f32(rng: &mut impl RngCore, scale: f32) -> f32 {
    (2.0 * unit_f32(rng) - 1.0) * scale
}

/// Uniform integer in `[0, n)` by rejection on the top bits.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Point drawn uniformly from the unit sphere in `dim` dimensions.
pub fn unit_vector(rng: &mut impl RngCore, dim: usize) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v: Vec<f32> = (0..dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x as f32
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
