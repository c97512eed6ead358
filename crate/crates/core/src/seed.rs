//! Seed derivation. Every random stream in the pipeline is keyed by a master
//! seed plus a small tuple of indices so that work can be reordered or run
//! in parallel without changing any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with an ordered list of stream tags.
pub fn derive(parent: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(parent), |acc, &t| {
        splitmix64(acc ^ splitmix64(t))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags for the different consumers of randomness.
pub mod stream {
    pub const COLLECT: u64 = 1;
    pub const TRAINING_ROLLOUT: u64 = 2;
    pub const NET_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const TEST_SET: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const SURROGATE: u64 = 7;
    pub const GMM_INIT: u64 = 8;
}
