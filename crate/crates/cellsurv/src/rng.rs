//! Deterministic RNG stream derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from a root seed plus a tag path (fold index, epoch, image id, ...), so
//! results are reproducible regardless of execution order or concurrency.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte slice; used to fold string tags into stream keys.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent stream from a root seed and a tag path.
pub fn stream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = mix(root);
    for &t in tags {
        key = mix(key ^ mix(t));
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// Stream tags for the pipeline stages, kept in one place so derivations
/// never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const SPARSIFY: u64 = 3;
    pub const DATAGEN: u64 = 4;
    pub const FOLDS: u64 = 5;
}
