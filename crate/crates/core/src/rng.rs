//! Seeded random streams.
//!
//! Every stochastic stage draws from a `ChaCha8Rng`. Normal variates come from
//! `rand_distr::StandardNormal` (ziggurat method); uniform variates from the
//! standard 53-bit `[0, 1)` conversion. Sub-streams are derived by hashing a
//! parent seed together with a label, so each stage and each replicate gets an
//! independent, reproducible stream regardless of evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Derives a child seed as the first eight bytes (little endian) of
/// `SHA-256("{parent}/{label}")`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(format!("{parent}/{label}").as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed for the `index`-th counter-based sub-stream under `label`.
pub fn derive_indexed_seed(parent: u64, label: &str, index: usize) -> u64 {
    derive_seed(parent, &format!("{label}#{index}"))
}

pub fn stream(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Row-major `rows × cols` matrix of i.i.d. N(0, 1) draws.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| standard_normal(rng)).collect()
}

/// Lowercase hex SHA-256 of the little-endian bytes of `values`.
pub fn content_hash(values: impl IntoIterator<Item = f64>) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
