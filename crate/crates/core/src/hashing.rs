//! Stable hashing and seed derivation.
//!
//! Everything seeded in the pipeline derives its generator from a master seed
//! plus a textual tag, so results do not depend on iteration order or thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derives a child seed from `master` and an ordered list of tags.
pub fn derive_seed(master: u64, tags: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for tag in tags {
        // length prefix keeps ("ab","c") and ("a","bc") apart
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(buf)
}

/// A ChaCha generator seeded from `derive_seed(master, tags)`.
pub fn rng_for(master: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Uniform value in `[0, 1)` that is a pure function of the inputs.
pub fn unit_hash(master: u64, tags: &[&str]) -> f64 {
    (derive_seed(master, tags) >> 11) as f64 / (1u64 << 53) as f64
}
