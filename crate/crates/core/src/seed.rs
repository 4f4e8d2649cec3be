//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a parent seed
//! and a stream label, so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream` of `parent`.
pub fn derive(parent: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Child seed labelled by a string, for readability at call sites.
pub fn derive_named(parent: u64, label: &str) -> u64 {
    // FNV-1a
    let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    derive(parent, h)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
