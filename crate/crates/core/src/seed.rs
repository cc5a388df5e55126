//! Named PRNG streams.
//!
//! Every random decision in a run draws from its own ChaCha stream whose
//! seed is derived from the master seed plus a label and integer indices.
//! Adding a new stream therefore never shifts the values seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed`, a stream label and indices.
pub fn derive(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = mix64(seed);
    for b in label.bytes() {
        h = mix64(h ^ u64::from(b));
    }
    // separator so ("a", [1]) and ("a\x01", []) differ
    h = mix64(h ^ 0xFF00_FF00_FF00_FF00);
    for &i in indices {
        h = mix64(h ^ i);
    }
    h
}

/// Opens the stream `label[indices]` under `seed`.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, label, indices))
}

/// Seed for the `repetition`-th repeat of an experiment.
pub fn repetition_seed(master: u64, repetition: usize) -> u64 {
    mix64(master.wrapping_add(repetition as u64))
}
