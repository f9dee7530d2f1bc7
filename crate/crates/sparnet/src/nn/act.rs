//! Pointwise activations.

use ndarray::{Array4, ArrayD, IxDyn};

use super::{Layer, Param, ParamVisitor, Scalar};

/// Parametric ReLU with one learnable slope shared across all channels.
pub struct PRelu<F: Scalar> {
    /// Negative-side slope, shape `(1,)`.
    pub alpha: Param<F>,
    cache: Option<Array4<F>>,
}

impl<F: Scalar> PRelu<F> {
    pub fn new(init: f64) -> Self {
        let alpha = ArrayD::from_elem(IxDyn(&[1]), F::from_f64(init));
        Self {
            alpha: Param::new(alpha),
            cache: None,
        }
    }
}

impl<F: Scalar> Default for PRelu<F> {
    /// Slope 0.25, the customary starting point for parametric rectifiers.
    fn default() -> Self {
        Self::new(0.25)
    }
}

impl<F: Scalar> Layer<F> for PRelu<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let a = self.alpha.value[[0]];
        let y = x.mapv(|v| if v >= F::zero() { v } else { a * v });
        self.cache = if train { Some(x.clone()) } else { None };
        y
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let x = self.cache.as_ref().expect("prelu backward before forward");
        let a = self.alpha.value[[0]];
        let mut da = F::zero();
        let mut grad_in = grad_out.clone();
        ndarray::Zip::from(&mut grad_in).and(x).for_each(|g, &xv| {
            if xv < F::zero() {
                da += *g * xv;
                *g = *g * a;
            }
        });
        self.alpha.grad[[0]] += da;
        grad_in
    }

    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        f(&super::join(prefix, "alpha"), &mut self.alpha);
    }
}

/// Leaky ReLU with a fixed negative-side slope.
pub struct LeakyRelu<F: Scalar> {
    slope: F,
    cache: Option<Array4<F>>,
}

impl<F: Scalar> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        Self {
            slope: F::from_f64(slope),
            cache: None,
        }
    }
}

impl<F: Scalar> Layer<F> for LeakyRelu<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let s = self.slope;
        let y = x.mapv(|v| if v >= F::zero() { v } else { s * v });
        self.cache = if train { Some(x.clone()) } else { None };
        y
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let x = self.cache.as_ref().expect("leaky relu backward before forward");
        let s = self.slope;
        let mut grad_in = grad_out.clone();
        ndarray::Zip::from(&mut grad_in).and(x).for_each(|g, &xv| {
            if xv < F::zero() {
                *g = *g * s;
            }
        });
        grad_in
    }
}

/// Plain ReLU.
pub struct Relu<F: Scalar> {
    inner: LeakyRelu<F>,
}

impl<F: Scalar> Relu<F> {
    pub fn new() -> Self {
        Self {
            inner: LeakyRelu::new(0.0),
        }
    }
}

impl<F: Scalar> Default for Relu<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Relu<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        self.inner.forward(x, train)
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        self.inner.backward(grad_out)
    }
}

/// Logistic sigmoid; caches its output, whose value fully determines the
/// local derivative.
pub struct Sigmoid<F: Scalar> {
    cache: Option<Array4<F>>,
}

impl<F: Scalar> Sigmoid<F> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<F: Scalar> Default for Sigmoid<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Sigmoid<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let one = F::one();
        let y = x.mapv(|v| one / (one + (-v).exp()));
        self.cache = if train { Some(y.clone()) } else { None };
        y
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let y = self.cache.as_ref().expect("sigmoid backward before forward");
        let one = F::one();
        let mut grad_in = grad_out.clone();
        ndarray::Zip::from(&mut grad_in).and(y).for_each(|g, &yv| {
            *g = *g * yv * (one - yv);
        });
        grad_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn probe() -> Array4<f64> {
        array![[[[-2.0, -0.5], [0.0, 0.5]], [[1.0, 3.0], [-1.0, 0.25]]]]
    }

    #[test]
    fn prelu_scales_only_negative_side() {
        let mut act: PRelu<f64> = PRelu::new(0.25);
        let y = act.forward(&probe(), false);
        assert_abs_diff_eq!(y[[0, 0, 0, 0]], -0.5);
        assert_abs_diff_eq!(y[[0, 0, 0, 1]], -0.125);
        assert_abs_diff_eq!(y[[0, 0, 1, 0]], 0.0);
        assert_abs_diff_eq!(y[[0, 1, 0, 1]], 3.0);
    }

    #[test]
    fn prelu_alpha_gradient_is_sum_of_negative_inputs() {
        let mut act: PRelu<f64> = PRelu::new(0.25);
        let x = probe();
        act.forward(&x, true);
        let ones = Array4::from_elem(x.dim(), 1.0);
        let gin = act.backward(&ones);
        // Positive inputs pass the gradient through; negatives scale by alpha.
        assert_abs_diff_eq!(gin[[0, 0, 0, 0]], 0.25);
        assert_abs_diff_eq!(gin[[0, 1, 0, 0]], 1.0);
        // d/d(alpha) = sum of x over the negative region: -2 - 0.5 - 1 = -3.5.
        assert_abs_diff_eq!(act.alpha.grad[[0]], -3.5);
    }

    #[test]
    fn sigmoid_matches_closed_form_derivative() {
        let mut act: Sigmoid<f64> = Sigmoid::new();
        let x = probe();
        let y = act.forward(&x, true);
        let ones = Array4::from_elem(x.dim(), 1.0);
        let gin = act.backward(&ones);
        for (g, &yv) in gin.iter().zip(y.iter()) {
            assert_abs_diff_eq!(*g, yv * (1.0 - yv), epsilon = 1e-15);
        }
        assert_abs_diff_eq!(y[[0, 0, 1, 0]], 0.5);
    }

    #[test]
    fn leaky_relu_uses_fixed_slope() {
        let mut act: LeakyRelu<f64> = LeakyRelu::new(0.2);
        let y = act.forward(&probe(), true);
        assert_abs_diff_eq!(y[[0, 0, 0, 0]], -0.4);
        let gin = act.backward(&Array4::from_elem((1, 2, 2, 2), 2.0));
        assert_abs_diff_eq!(gin[[0, 0, 0, 0]], 0.4);
        assert_abs_diff_eq!(gin[[0, 1, 0, 1]], 2.0);
    }
}
