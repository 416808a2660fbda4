//! Counter-based random streams keyed by `(seed, stream, id)`.
//!
//! Each randomized operation draws from its own ChaCha stream whose key is a
//! SHA-256 digest of the global seed, a stream label and an item id, so
//! results never depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, label: &str, id: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(id.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Derives a child seed, for handing a sub-stream to another component.
pub fn derive_seed(seed: u64, label: &str, id: &str) -> u64 {
    use rand::RngCore;
    stream(seed, label, id).next_u64()
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64, label: &str, id: &str) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, label, id));
    order
}
