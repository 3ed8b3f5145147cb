//! Seed derivation. Every stochastic choice draws from a stream keyed by
//! `(seed, label, index)`, so sample `i` of anything is reproducible on its
//! own without replaying the streams before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a; stable across platforms and releases, unlike std's hasher.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Independent generator for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed);
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        let word = match i {
            0 => state,
            1 => splitmix64(state ^ hash_label(label)),
            2 => splitmix64(state ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93)),
            _ => splitmix64(state.rotate_left(17) ^ hash_label(label) ^ index),
        };
        chunk.copy_from_slice(&word.to_le_bytes());
        state = splitmix64(state ^ word);
    }
    Rng::from_seed(key)
}

/// Derive a child seed, for handing a seed to a component that keys its own
/// streams.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ hash_label(label)) ^ index)
}
