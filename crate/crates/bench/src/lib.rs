//! Shared fixtures for the benchmarks.

use aff_core::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform tensor in [-1, 1), fixed by `seed`.
pub fn tensor(shape: Shape, seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
