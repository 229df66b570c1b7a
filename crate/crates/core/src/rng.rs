//! Seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded with a 64-bit value derived from
//! the master seed through [`mix`]. `mix(seed, tag) = splitmix64(seed ^ splitmix64(tag))`, where
//! `splitmix64` is the finaliser of Steele, Lea and Flood's SplitMix64 generator applied to
//! `x + 0x9E3779B97F4A7C15`. Deriving a stream for `(master, phase, index)` is
//! `mix(mix(master, phase), index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Phase tags used when deriving episode seeds.
pub mod phase {
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const INIT: u64 = 3;
    pub const AGENT: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const CHECKS: u64 = 6;
    pub const GRID: u64 = 7;
    pub const POLICY: u64 = 8;
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Seed for item `index` of `phase` under `master`.
pub fn derive(master: u64, phase: u64, index: u64) -> u64 {
    mix(mix(master, phase), index)
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
