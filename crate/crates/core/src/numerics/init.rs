//! Seeded tensor initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor, TensorError};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries drawn uniformly from `[-bound, bound)`.
pub fn uniform<T: Scalar>(
    shape: &[usize],
    bound: f64,
    rng: &mut SeededRng,
) -> Result<Tensor<T>, TensorError> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Uniform with bound `sqrt(3 / fan_in)`, i.e. unit variance of `x·w` for
/// unit-variance inputs.
pub fn scaled_uniform<T: Scalar>(
    shape: &[usize],
    rng: &mut SeededRng,
) -> Result<Tensor<T>, TensorError> {
    let fan_in = shape[0].max(1) as f64;
    uniform(shape, (3.0 / fan_in).sqrt(), rng)
}
