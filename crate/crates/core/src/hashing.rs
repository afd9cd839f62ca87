//! Content digests and keyed hashing.
//!
//! Every piece of pseudo-randomness in the crate is derived from SHA-256 over
//! explicit key material so that results are identical across processes,
//! platforms and thread schedules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn keyed_bytes(seed: u64, parts: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        // length prefix keeps ("ab", "c") distinct from ("a", "bc")
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.finalize().into()
}

/// Uniform value in `[0, 1)` derived from `(seed, parts)`.
pub fn unit(seed: u64, parts: &[&str]) -> f64 {
    let bytes = keyed_bytes(seed, parts);
    let mut word = [0u8; 8];
    word.copy_from_slice(&bytes[..8]);
    // 53 high bits give every representable multiple of 2^-53
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal deviate derived from `(seed, parts)` via Box-Muller.
pub fn gaussian(seed: u64, parts: &[&str]) -> f64 {
    let bytes = keyed_bytes(seed, parts);
    let mut first = [0u8; 8];
    let mut second = [0u8; 8];
    first.copy_from_slice(&bytes[..8]);
    second.copy_from_slice(&bytes[8..16]);
    let scale = (1u64 << 53) as f64;
    let u1 = ((u64::from_le_bytes(first) >> 11) as f64 + 1.0) / (scale + 1.0);
    let u2 = (u64::from_le_bytes(second) >> 11) as f64 / scale;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Named substream of the run seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(keyed_bytes(seed, &["substream", name]))
}
