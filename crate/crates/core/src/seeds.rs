//! Deterministic seed derivation.
//!
//! Every parallel unit of work (a subject, a patch location, a repetition)
//! derives its own generator from a mixed seed so results never depend on
//! scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates consecutive inputs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of seed components into one 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x51ed_2701_b1a6_1f1du64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// A stream generator for the given seed components.
pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
