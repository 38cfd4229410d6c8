//! Independent deterministic random streams keyed by `(seed, tag, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Each consumer of randomness gets its own tag so adding draws
/// in one place never shifts the values seen elsewhere.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const LABELED: u64 = 2;
    pub const UNLABELED_ID: u64 = 3;
    pub const UNLABELED_OOD: u64 = 4;
    pub const TEST_ID: u64 = 5;
    pub const TEST_OOD: u64 = 6;
    pub const UNSEEN_OOD: u64 = 7;
    pub const BATCH: u64 = 8;
    pub const GRADCHECK: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A 64-bit seed for `(seed, tag, index)`.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}
