//! Namespaced seed derivation.
//!
//! Each consumer derives its stream from the global seed and a stable name,
//! so adding a consumer never reshuffles the streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(global: u64, namespace: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(namespace.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(global: u64, namespace: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(global, namespace))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
