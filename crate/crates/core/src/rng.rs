//! Seeded RNG stream derivation.
//!
//! Every source of randomness in the simulator is a `ChaCha8Rng` keyed by a
//! base seed plus a list of tags (purpose, round, client id, ...). Two streams
//! with different tag lists are independent for all practical purposes, and a
//! given (seed, tags) pair always yields the same stream, which is what makes
//! whole runs reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purpose tags. Kept in one place so no two call sites collide.
pub mod tag {
    pub const TRANSITIONS: u64 = 1;
    pub const CLIENT_DATA: u64 = 2;
    pub const POISON: u64 = 3;
    pub const BACKDOOR_TEST: u64 = 4;
    pub const BENIGN_TEST: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const SERVER: u64 = 8;
    pub const RUN: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a tag list into a single 64-bit stream seed.
pub fn stream_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x6a09_e667_f3bc_c909);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Deterministic RNG for the given (seed, tags) stream.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, tags))
}
