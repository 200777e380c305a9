//! Seed derivation.
//!
//! Every random decision in an experiment draws from its own ChaCha stream
//! seeded by `sha256("{master}/{part}/{part}/...")`, truncated to the first
//! eight bytes (little endian). Streams therefore depend only on their labels,
//! never on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_string().as_bytes());
    for part in parts {
        hasher.update(b"/");
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn rng_for(master: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

/// Uniform value in `[0, 1)` that depends only on the labels.
pub fn unit_hash(master: u64, parts: &[&str]) -> f64 {
    (derive_seed(master, parts) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}
