//! Deterministic, platform-stable RNG derivation.
//!
//! Std's `DefaultHasher` is not stable across compiler releases, so seeds are
//! derived with FNV-1a and expanded with splitmix64. The same (seed, labels)
//! always yields the same stream, on every platform, which is what makes
//! per-question parallel selection replayable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hashes a seed plus string labels into a single 64-bit value.
pub fn stable_hash(seed: u64, labels: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    for label in labels {
        h = fnv1a(h, label.as_bytes());
        h = fnv1a(h, &[0xff]); // separator so ("ab","c") != ("a","bc")
    }
    h
}

/// Derives an independent RNG stream for (seed, labels).
pub fn derive_rng(seed: u64, labels: &[&str]) -> ChaCha12Rng {
    let mut state = stable_hash(seed, labels);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
