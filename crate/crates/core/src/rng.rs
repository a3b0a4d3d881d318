//! Seed plumbing. Every random stream in the crate is a `ChaCha8Rng` keyed by a
//! `u64` derived from the experiment seed, so runs replay bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `base` for stream `tag`, item `index`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ tag) ^ index)
}

/// Stream tags, kept distinct so that e.g. the init stream of model 3 never
/// coincides with the dropout stream of model 3.
pub mod tag {
    pub const INIT: u64 = 0x11;
    pub const DROPOUT: u64 = 0x12;
    pub const BATCHES: u64 = 0x13;
    pub const POPULATION: u64 = 0x21;
    pub const SEARCH: u64 = 0x22;
    pub const FINAL: u64 = 0x23;
    pub const SAMPLE: u64 = 0x31;
    pub const SPLIT: u64 = 0x32;
    pub const DATA: u64 = 0x33;
    pub const FOREST: u64 = 0x41;
    pub const TREE: u64 = 0x42;
    pub const HOLDOUT: u64 = 0x43;
}
