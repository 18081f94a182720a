//! Counter-based seed derivation so that per-item randomness does not depend
//! on iteration order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of stream `stream` under the run seed `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)
}

pub fn stream_rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// Named streams keep unrelated consumers of randomness independent.
pub mod streams {
    pub const PATIENT: u64 = 1;
    pub const LABEL: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const WEIGHTS: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const EXPLAIN: u64 = 9;
    pub const SOFT_LABEL: u64 = 10;
    pub const AGE_WEIGHTS: u64 = 11;
    pub const GUMBEL: u64 = 12;
}
