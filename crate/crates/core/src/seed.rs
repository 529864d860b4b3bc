//! Stable seed derivation for independent deterministic RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a seed from a base seed and a path of integers. Stable across
/// platforms and releases.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A ChaCha8 stream keyed by `(base, path)`.
pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Stream tags keeping unrelated consumers of one base seed apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PRETRAIN_ORDER: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const HEAD: u64 = 6;
    pub const CELL: u64 = 7;
    pub const PROTOTYPE: u64 = 8;
    pub const EXAMPLE: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_path_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
        // Frozen value: changing the mixer would silently change every run.
        assert_eq!(derive(0, &[]), 0xE220_A839_7B1D_CDAF);
    }
}
