//! Deterministic seed derivation and seeded sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Child seed from a parent seed and a label, stable across platforms and
/// releases (first eight bytes of SHA-256 over both).
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` independent standard normal draws.
pub fn normals<T: Scalar>(seed: u64, n: usize) -> Vec<T> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| T::lit(r.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Standard normal tensor of the given shape.
pub fn normal_tensor<T: Scalar>(seed: u64, height: usize, width: usize, channels: usize) -> Tensor<T> {
    Tensor::new(
        height,
        width,
        channels,
        normals(seed, height * width * channels),
    )
    .expect("length matches shape")
}
