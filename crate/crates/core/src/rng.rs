//! Seeded randomness.
//!
//! Every random draw in the crate comes from xoshiro256++ (Blackman & Vigna),
//! seeded through SplitMix64 exactly as `rand_xoshiro::Xoshiro256PlusPlus::
//! seed_from_u64` does. Independent consumers get named substreams derived
//! from the run seed, so adding draws to one consumer never perturbs another.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Substream names used across the crate.
pub mod stream {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const START_TOKENS: &str = "start-tokens";
    pub const BATCHES: &str = "batches";
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive the generator for a named substream of `seed`.
///
/// The name is hashed with 64-bit FNV-1a and mixed into the seed with one
/// SplitMix64 round before seeding xoshiro256++.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seeded(splitmix64(seed ^ h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
