//! Deterministic seed derivation.
//!
//! Every random stream in the workspace is a ChaCha8 generator seeded from a
//! base seed and a textual tag, so results never depend on call order or
//! platform hasher state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    splitmix(base ^ fnv1a(tag.as_bytes()))
}

/// Derive a child seed from a base seed, a tag, and an index (epoch,
/// utterance number, trial number, ...).
pub fn derive_seed_n(base: u64, tag: &str, n: u64) -> u64 {
    splitmix(derive_seed(base, tag).wrapping_add(splitmix(n)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
