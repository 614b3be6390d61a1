//! Seed derivation.
//!
//! Every random stream in a run is a `ChaCha8Rng` seeded from the master seed
//! and a path of tags, so streams are independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a sequence of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags used by the simulation; fixed so runs stay reproducible.
pub mod stream {
    pub const HOLDOUT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const USER_ORDER: u64 = 4;
    pub const ENV: u64 = 5;
    pub const SCORING: u64 = 6;
    pub const BOOTSTRAP_SLATES: u64 = 7;
    pub const WARM_START: u64 = 8;
    pub const MEMBER_INIT: u64 = 10;
    pub const MEMBERSHIP: u64 = 11;
    pub const SHUFFLE: u64 = 12;
    pub const TRAIN_DROPOUT: u64 = 13;
    pub const SWEEP: u64 = 20;
}
