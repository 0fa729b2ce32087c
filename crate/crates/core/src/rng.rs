//! Deterministic random-stream derivation.
//!
//! Every randomized operation in the simulator draws from its own ChaCha
//! stream derived from `(seed, tag)`, so operations are reproducible in
//! isolation and insensitive to call order. The tag hash is a fixed FNV-1a,
//! not the standard library hasher, so streams are stable across platforms
//! and toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, tag: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in seed.to_le_bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(FNV_PRIME);
    }
    for byte in tag.as_bytes() {
        h = (h ^ u64::from(*byte)).wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `(seed, tag)`, for handing down to sub-operations.
pub fn derive(seed: u64, tag: &str) -> u64 {
    splitmix64(fnv1a(seed, tag))
}

/// A dedicated random stream for `(seed, tag)`.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_inputs_same_stream() {
        let a: Vec<u64> = stream(7, "x").random_iter().take(4).collect();
        let b: Vec<u64> = stream(7, "x").random_iter().take(4).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_tags_different_streams() {
        let a: u64 = stream(7, "x").random();
        let b: u64 = stream(7, "y").random();
        assert_ne!(a, b);
    }

    #[test]
    fn derivation_is_pinned() {
        // Frozen value: guards against accidental changes to the derivation,
        // which would silently change every experiment output.
        assert_eq!(derive(42, "data/gen"), 0xc84b_5029_13a7_36db);
    }
}
