//! Keyed random streams.
//!
//! Every stochastic quantity is drawn from a ChaCha stream selected by a
//! `(seed, key)` pair, so results never depend on evaluation order or on the
//! number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream for shot `shot` of class index `class` under `seed`.
pub fn shot_stream(seed: u64, class: usize, shot: usize) -> ChaCha8Rng {
    keyed_stream(seed, ((class as u64) << 40) | shot as u64)
}

pub fn keyed_stream(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Derive a child seed from a parent seed and an integer tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser over the combined word
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
