//! Parameter initialisers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}
