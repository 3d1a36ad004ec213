//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a root seed and a stream label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn substream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
