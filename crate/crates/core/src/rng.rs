//! Seed derivation for independent, schedule-free RNG streams.
//!
//! Every stochastic draw in the pipeline (walk pools, Bernoulli draws, noise
//! for the concrete relaxation, negatives) comes from a ChaCha stream keyed by
//! a tuple of integers, so parallel and serial evaluation see the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams for different uses apart even when the other
/// key components collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    Negatives = 4,
    Walks = 5,
    Draws = 6,
    SocialPairs = 7,
    EvalWalks = 8,
    EvalDraws = 9,
    ValNegatives = 10,
    RandomRemoval = 11,
    Analysis = 12,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: Purpose, key: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(purpose as u64));
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, key: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, purpose, key))
}
