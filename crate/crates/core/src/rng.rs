//! Seeded random streams.
//!
//! Every consumer of randomness asks for a stream keyed by `(seed, purpose,
//! index)`. Streams are ChaCha8 instances, so two streams with different keys
//! never overlap and a stream can be recreated anywhere from its key alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derive an independent stream from a run seed, a purpose label and an index.
pub fn stream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// First word of a stream, used as the seed of a nested computation.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    stream(seed, purpose, index).random()
}

#[inline]
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
