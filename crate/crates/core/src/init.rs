use rand::Rng;

use crate::tensor::Tensor;

/// Xavier-Glorot uniform initialisation: entries drawn from
/// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

/// Xavier init for a `rows × cols` matrix used as `x · W`.
pub fn xavier_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    xavier_uniform(&[rows, cols], rows, cols, rng)
}
