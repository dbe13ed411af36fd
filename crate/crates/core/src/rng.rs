//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 (`rand_chacha`), whose output stream is
//! fixed by its algorithm and therefore identical on every platform. Derived
//! streams mix a parent seed with a label through SplitMix64 so that, for
//! example, each sweep cell gets an independent generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent sub-stream identified by `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn derived(seed: u64, stream: u64) -> SeededRng {
    seeded(derive_seed(seed, stream))
}
