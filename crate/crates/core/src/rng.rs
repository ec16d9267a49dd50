//! Seed fan-out.
//!
//! A single master seed is expanded into independent named streams so that
//! every stage (data, init, augment, kmeans, ...) can be reproduced on its
//! own. A sub-seed is `splitmix64(master ^ fnv1a64(name))`, and indexed
//! sub-streams fold the index in with one more splitmix round.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named sub-seed of `master`.
pub fn sub_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a64(name.as_bytes()))
}

/// Sub-seed for the `index`-th item of a named stream.
pub fn indexed_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(sub_seed(master, name) ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn named_rng(master: u64, name: &str) -> Rng {
    rng_from(sub_seed(master, name))
}
