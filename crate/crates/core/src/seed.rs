//! Component-keyed seed splitting.
//!
//! Every random stream in a run is derived from the master seed and a
//! component name, never from the order in which work happens to be
//! scheduled:
//!
//! ```text
//! seed(master, name) = u64_le(SHA-256(u64_le(master) || utf8(name))[0..8])
//! ```
//!
//! Names are slash-separated paths such as `meta/iter/12/task/1/train`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Deterministic generator for the named component.
pub fn rng_for(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_name_sensitive() {
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
    }

    #[test]
    fn matches_documented_construction() {
        // Value computed with an external SHA-256 implementation.
        assert_eq!(derive_seed(42, "meta"), 11376842558435884962);
    }
}
