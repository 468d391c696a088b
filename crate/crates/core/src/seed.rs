//! Seed derivation.
//!
//! Every random choice in the pipeline flows from one root seed. Sub-seeds
//! are derived by hashing the parent seed together with a label (a stage
//! name, a slice id, a request sequence number), so each consumer gets an
//! independent stream that does not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The RNG used everywhere a seeded stream is needed.
pub type SeededRng = ChaCha8Rng;

/// Derive a child seed from `parent` and a list of labels.
pub fn derive_seed(parent: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(parent: u64, labels: &[&str]) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(parent, labels))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
