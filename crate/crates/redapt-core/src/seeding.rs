//! Deterministic seed derivation.
//!
//! Everything stochastic in this crate (initialisation, dropout masks, batch
//! sampling, clip synthesis) draws from a counter-based scheme: a ChaCha8
//! stream keyed by a hash of `(root seed, structural identifiers…)`. Streams
//! never depend on call order, so reordering work — or running parts of it in
//! parallel — cannot change which numbers anything sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser; good avalanche, cheap, stable across platforms.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a list of identifying words into one well-mixed seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3; // arbitrary non-zero start
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// A ChaCha8 stream keyed by the mixed parts.
pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mix_is_order_sensitive_and_stable() {
        assert_eq!(mix(&[1, 2]), mix(&[1, 2]));
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
        assert_ne!(mix(&[0]), mix(&[0, 0]));
    }

    #[test]
    fn derived_streams_are_reproducible() {
        let a: f64 = rng_from(&[42, 7]).random();
        let b: f64 = rng_from(&[42, 7]).random();
        let c: f64 = rng_from(&[42, 8]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
