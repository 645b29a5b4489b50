//! Seed derivation. Every random stream is keyed by a base seed plus a tag path,
//! so results never depend on call order or worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each tag in turn.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream identifiers used by the trainer and data pipeline.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const DROPOUT_STUDENT: u64 = 2;
    pub const DROPOUT_TEACHER: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const NEGATIVES: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PHANTOM: u64 = 7;
    pub const SPLIT: u64 = 8;
}
