//! Sub-seed derivation: every consumer of randomness gets its own stream
//! keyed by `(master seed, purpose tag)`.

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
