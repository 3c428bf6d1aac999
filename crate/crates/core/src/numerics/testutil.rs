use rand::Rng;

use super::init::{seeded_rng, uniform, SeededRng};
use super::Tensor;

pub(crate) fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, 1.0, &mut seeded_rng(seed)).unwrap()
}

pub(crate) struct TestRng(SeededRng);

impl TestRng {
    pub(crate) fn new(seed: u64) -> Self {
        Self(seeded_rng(seed))
    }

    pub(crate) fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub(crate) fn unit(&mut self) -> f64 {
        self.0.gen()
    }
}
