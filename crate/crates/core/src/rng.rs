//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a hash of (run seed, purpose, indices), so streams never share
//! state and can be recreated from their key alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Mixes a base seed, a purpose label and a list of indices into one key.
pub fn derive_seed(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(purpose));
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, indices))
}
