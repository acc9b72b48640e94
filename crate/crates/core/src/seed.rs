//! Seed splitting.
//!
//! Every random decision in the pipeline draws from a generator seeded by
//! [`derive_seed`]: the first eight bytes (little endian) of
//! `SHA-256(master.to_le_bytes() || label)`. Stages use their name as the
//! label; per-tuple streams use the tuple key, so results never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a labelled sub-stream of `master`.
pub fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    rng(derive_seed(master, label))
}
