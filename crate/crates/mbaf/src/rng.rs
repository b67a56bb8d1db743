//! Seed derivation.
//!
//! Every random stream in the crate is derived from a single master seed as
//! `SHA-256(master_le_bytes || purpose_tag || index_le_bytes)`, truncated to
//! the generator's 32-byte seed. Streams for distinct `(tag, index)` pairs
//! are independent, so episodes and batches can be generated in any order
//! (or skipped) without disturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte seed from `(master, tag, index)`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// A fresh deterministic generator for the stream `(master, tag, index)`.
pub fn derive_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, tag, index))
}

/// A derived master seed for an independent sub-experiment (the first eight
/// bytes of the derived seed).
pub fn derive_subseed(master: u64, tag: &str, index: u64) -> u64 {
    let seed = derive_seed(master, tag, index);
    u64::from_le_bytes(seed[..8].try_into().expect("eight bytes"))
}
