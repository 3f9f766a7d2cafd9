//! Seeded parameter initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut SeededRng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub fn normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// He-uniform for a conv kernel `[c_out, c_in, k, k]`: bound `sqrt(6 / fan_in)`.
pub fn he_uniform(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

/// Random unit vector, used to seed power iteration.
pub fn unit_vector(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let mut v = normal(rng, &[n]).into_data();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}
