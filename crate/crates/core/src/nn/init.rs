//! Weight initialization.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal initialization for a conv kernel of shape (out_c, in_c, k, k).
pub fn he_conv(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Array4<f32> {
    let fan_in = (in_c * k * k) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    Array4::from_shape_simple_fn((out_c, in_c, k, k), || dist.sample(rng) as f32)
}

/// He-normal initialization for a depthwise kernel of shape (c, k, k).
pub fn he_depthwise(c: usize, k: usize, rng: &mut impl Rng) -> ndarray::Array3<f32> {
    let fan_in = (k * k) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    ndarray::Array3::from_shape_simple_fn((c, k, k), || dist.sample(rng) as f32)
}

/// He-normal initialization for a linear weight of shape (out, in).
pub fn he_linear(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Array2<f32> {
    let dist = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
    Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng) as f32)
}

pub fn zero_bias(n: usize) -> Array1<f32> {
    Array1::zeros(n)
}
