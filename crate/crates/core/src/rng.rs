//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (parameter init, sampler noise, k-means
//! seeding, surrogate phrase vectors) asks for its own stream by name, so
//! adding a draw in one place never shifts the numbers seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub const DEFAULT_SEED: u64 = 489;

pub type StreamRng = ChaCha20Rng;

/// Stream keyed by `(root, name)`.
pub fn substream(root: u64, name: &str) -> StreamRng {
    keyed_substream(root, name, &[])
}

/// Stream keyed by `(root, name, index)`; used where a stream per item is needed.
pub fn indexed_substream(root: u64, name: &str, index: u64) -> StreamRng {
    keyed_substream(root, name, &index.to_le_bytes())
}

pub fn keyed_substream(root: u64, name: &str, key: &[u8]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(key);
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform_vec(rng: &mut impl Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}
