//! Seed derivation.
//!
//! Child seeds are derived with the SplitMix64 finalizer applied to
//! `base ^ (index + 1) * GOLDEN`, so `derive_seed(b, i)` is a fixed,
//! platform-independent function of `(b, i)`. Random streams are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th child of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ index.wrapping_add(1).wrapping_mul(GOLDEN))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
