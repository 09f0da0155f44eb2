//! Deterministic RNG streams derived from (seed, context path) tuples.
//!
//! Every random draw in the pipeline comes from a [`ChaCha8Rng`] seeded here,
//! so outputs are reproducible bit-for-bit across runs and platforms and do
//! not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a context path.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// RNG for a bare seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for a derived (seed, path) stream.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_is_deterministic_and_path_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
    }

    #[test]
    fn streams_reproduce() {
        let a: Vec<u64> = (0..4).map(|_| stream(3, &[9]).next_u64()).collect();
        assert!(a.iter().all(|&v| v == a[0]));
    }
}
