//! Seeded random number generation.
//!
//! All stochastic code in the crate draws from ChaCha8, a counter-based
//! generator: a (seed, stream) pair fully determines the byte sequence on
//! every platform, so rollouts and experiments replay bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for a given seed on a dedicated stream.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a seed with a tag into a fresh 64-bit seed (splitmix64 finalizer).
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Three-way mix for per-(round, episode) streams.
pub fn mix3(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed, a.wrapping_add(1)), b.wrapping_add(0x51d2))
}
