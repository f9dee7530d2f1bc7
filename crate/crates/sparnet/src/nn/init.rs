//! Weight initialisation.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Scalar;

/// Kaiming normal initialisation for rectifier networks: zero-mean Gaussian
/// with standard deviation `sqrt(2 / ((1 + neg_slope^2) * fan_in))`, where
/// `neg_slope` is the negative-side slope of the following rectifier.
///
/// Values are drawn in `f64` so the same seed produces the same weights
/// regardless of the target scalar type.
pub fn kaiming_normal<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    neg_slope: f64,
) -> ArrayD<F> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (2.0 / ((1.0 + neg_slope * neg_slope) * fan_in as f64)).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let len: usize = shape.iter().product();
    let values: Vec<F> = (0..len)
        .map(|_| F::from_f64(normal.sample(rng)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape matches length")
}
