//! Deterministic derivation of independent random streams from one base
//! seed. Every stochastic stage (data generation, shuffling, per-image
//! pseudo-label harvesting, weight init) pulls its own stream so that adding
//! draws to one never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// splitmix64 finalizer; decorrelates consecutive inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a base seed, a stream name, and index coordinates (epoch, image,
/// ...) into one well-mixed seed.
pub fn derive_seed(base: u64, stream: &str, indices: &[u64]) -> u64 {
    let mut state = mix(base);
    for &b in stream.as_bytes() {
        state = mix(state ^ u64::from(b));
    }
    for &i in indices {
        state = mix(state ^ i);
    }
    state
}

/// A ChaCha stream seeded by [`derive_seed`].
pub fn rng_for(base: u64, stream: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, indices))
}
