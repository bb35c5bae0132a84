//! Seeded parameter initialization.

use rand::Rng;

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive fan sizes")
}

/// Adds `{prefix}.w` (`fan_in × fan_out`, Glorot) and `{prefix}.b` (zeros).
pub fn push_dense<R: Rng + ?Sized>(
    params: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    params
        .push(format!("{prefix}.w"), glorot_uniform(rng, fan_in, fan_out))
        .expect("layer names are unique");
    params
        .push(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
        .expect("layer names are unique");
}
