//! Seed derivation.
//!
//! Every stochastic component draws from a ChaCha8 stream seeded with
//! `derive_seed(parent, label)`: the first 8 bytes (little-endian) of
//! `SHA-256(parent.to_le_bytes() || label)`. One global seed therefore fixes
//! the whole pipeline, and sibling components never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(parent: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}

/// Stable 64-bit digest of a descriptive string.
pub fn fingerprint(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
