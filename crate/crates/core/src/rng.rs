//! Deterministic random streams keyed by `(seed, replica)`.
//!
//! Every stream is a xoshiro256++ generator whose 64-bit seed is
//! `splitmix64(seed ^ splitmix64(replica + 0x9E3779B97F4A7C15))`; the
//! generator's own `seed_from_u64` then expands it with SplitMix64.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

/// Identity string embedded in experiment records.
pub const GENERATOR: &str = "xoshiro256++ keyed by splitmix64(seed ^ splitmix64(replica + 0x9E3779B97F4A7C15))";

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, replica: u64) -> u64 {
    splitmix64(seed ^ splitmix64(replica.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

pub fn stream(seed: u64, replica: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, replica))
}

/// Sub-stream for a named purpose within one replica.
pub fn substream(seed: u64, replica: u64, purpose: u64) -> StreamRng {
    stream(stream_seed(seed, replica), purpose)
}
