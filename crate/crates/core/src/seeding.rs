//! Deterministic RNG stream derivation.
//!
//! Every random draw in the simulator comes from a `ChaCha8Rng` whose seed is
//! derived from a base seed plus a list of tags (round, vehicle id, ...). Two
//! streams with different tags are independent, and a stream never depends on
//! how many threads are used or in which order clients are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams that share a base seed apart.
pub mod domain {
    pub const MODEL_INIT: u64 = 0x4d4f_4445_4c00;
    pub const DATASET: u64 = 0x4441_5441_0000;
    pub const PARTITION: u64 = 0x5041_5254_0000;
    pub const FACTOR_INIT: u64 = 0x4641_4354_0000;
    pub const SHUFFLE: u64 = 0x5348_5546_0000;
    pub const SCENARIO: u64 = 0x5343_454e_0000;
    pub const SPAWN: u64 = 0x5350_4157_0000;
    pub const FADING: u64 = 0x4641_4449_0000;
    pub const RANDOM_SCHEDULE: u64 = 0x5253_4348_0000;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a single 64-bit seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}
