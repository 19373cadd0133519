//! Deterministic randomness.
//!
//! Every random draw in the pipeline flows from a single 64-bit seed. Streams
//! are derived by hashing `(seed, domain, index)` into a ChaCha8 key, so any
//! component can recreate its stream independently of call order, and two
//! runs with the same seed are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Fill a buffer with standard-normal samples from a derived stream.
pub fn normal_vec(seed: u64, domain: &str, index: u64, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream(seed, domain, index);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}
