//! Deterministic seed derivation.
//!
//! A single user-facing `u64` seed fans out into independent RNG streams,
//! one per purpose string. Streams are derived by hashing, so adding a new
//! consumer never perturbs existing ones.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG for `(seed, purpose)`.
///
/// The purpose string should be unique per consumer, e.g. `"collect/episode/3"`
/// or `"eval/trial/17"`.
pub fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
