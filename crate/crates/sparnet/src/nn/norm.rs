//! Batch and instance normalization with exact train-mode backward passes.

use ndarray::{s, Array1, Array2, Array4, ArrayD, IxDyn, Zip};

use super::{Layer, Param, ParamVisitor, Scalar, StateVisitor};

const EPS: f64 = 1e-5;

/// Batch normalization over `(batch, height, width)` per channel.
///
/// Training mode normalizes with biased batch statistics and folds them into
/// the running estimates (`running = (1 - momentum) * running + momentum *
/// batch`, with the unbiased variance entering the running estimate).
/// Evaluation mode normalizes with the running estimates.
pub struct BatchNorm2d<F: Scalar> {
    /// Scale, shape `(c,)`, initialised to one.
    pub gamma: Param<F>,
    /// Shift, shape `(c,)`, initialised to zero.
    pub beta: Param<F>,
    /// Running mean, shape `(c,)`.
    pub running_mean: ArrayD<F>,
    /// Running (unbiased) variance, shape `(c,)`.
    pub running_var: ArrayD<F>,
    momentum: F,
    cache: Option<BnCache<F>>,
}

struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    train: bool,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: F::from_f64(0.1),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<F: Scalar> Layer<F> for BatchNorm2d<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channel mismatch");
        let m = n * h * w;
        let mf = F::from_f64(m as f64);
        let eps = F::from_f64(EPS);

        let (mean, var) = if train {
            assert!(m > 1, "batch norm needs more than one value per channel");
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let mut sum = F::zero();
                for b in 0..n {
                    sum += x.slice(s![b, ch, .., ..]).sum();
                }
                let mu = sum / mf;
                let mut sq = F::zero();
                for b in 0..n {
                    sq += x
                        .slice(s![b, ch, .., ..])
                        .fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu));
                }
                mean[ch] = mu;
                var[ch] = sq / mf;
            }
            let mom = self.momentum;
            let keep = F::one() - mom;
            let bessel = mf / F::from_f64((m - 1) as f64);
            for ch in 0..c {
                self.running_mean[[ch]] = keep * self.running_mean[[ch]] + mom * mean[ch];
                self.running_var[[ch]] = keep * self.running_var[[ch]] + mom * var[ch] * bessel;
            }
            (mean, var)
        } else {
            let mean = Array1::from_shape_fn(c, |ch| self.running_mean[[ch]]);
            let var = Array1::from_shape_fn(c, |ch| self.running_var[[ch]]);
            (mean, var)
        };

        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (g, be) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
                Zip::from(y.slice_mut(s![b, ch, .., ..]))
                    .and(xhat.slice_mut(s![b, ch, .., ..]))
                    .and(x.slice(s![b, ch, .., ..]))
                    .for_each(|yo, xh, &xv| {
                        let hn = (xv - mu) * is;
                        *xh = hn;
                        *yo = g * hn + be;
                    });
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, train });
        y
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let cache = self.cache.as_ref().expect("batch norm backward before forward");
        let (n, c, h, w) = grad_out.dim();
        let mf = F::from_f64((n * h * w) as f64);
        let mut grad_in = Array4::zeros((n, c, h, w));

        for ch in 0..c {
            let g = self.gamma.value[[ch]];
            let is = cache.inv_std[ch];
            let mut dgamma = F::zero();
            let mut dbeta = F::zero();
            let mut s1 = F::zero(); // sum of gamma * grad
            let mut s2 = F::zero(); // sum of gamma * grad * xhat
            for b in 0..n {
                Zip::from(grad_out.slice(s![b, ch, .., ..]))
                    .and(cache.xhat.slice(s![b, ch, .., ..]))
                    .for_each(|&go, &xh| {
                        dgamma += go * xh;
                        dbeta += go;
                        s1 += g * go;
                        s2 += g * go * xh;
                    });
            }
            self.gamma.grad[[ch]] += dgamma;
            self.beta.grad[[ch]] += dbeta;

            if cache.train {
                for b in 0..n {
                    Zip::from(grad_in.slice_mut(s![b, ch, .., ..]))
                        .and(grad_out.slice(s![b, ch, .., ..]))
                        .and(cache.xhat.slice(s![b, ch, .., ..]))
                        .for_each(|gi, &go, &xh| {
                            *gi = is / mf * (mf * g * go - s1 - xh * s2);
                        });
                }
            } else {
                let scale = g * is;
                for b in 0..n {
                    Zip::from(grad_in.slice_mut(s![b, ch, .., ..]))
                        .and(grad_out.slice(s![b, ch, .., ..]))
                        .for_each(|gi, &go| *gi = go * scale);
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        f(&super::join(prefix, "gamma"), &mut self.gamma);
        f(&super::join(prefix, "beta"), &mut self.beta);
    }

    fn visit_state(&mut self, prefix: &str, f: StateVisitor<F>) {
        f(&super::join(prefix, "running_mean"), &mut self.running_mean);
        f(&super::join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Instance normalization: statistics per sample and channel, no learnable
/// affine terms and no running estimates, so training and evaluation agree.
pub struct InstanceNorm2d<F: Scalar> {
    cache: Option<InCache<F>>,
}

struct InCache<F> {
    xhat: Array4<F>,
    inv_std: Array2<F>,
}

impl<F: Scalar> InstanceNorm2d<F> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<F: Scalar> Default for InstanceNorm2d<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for InstanceNorm2d<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h * w > 1, "instance norm needs more than one pixel");
        let mf = F::from_f64((h * w) as f64);
        let eps = F::from_f64(EPS);

        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array2::zeros((n, c));
        for b in 0..n {
            for ch in 0..c {
                let v = x.slice(s![b, ch, .., ..]);
                let mu = v.sum() / mf;
                let var = v.fold(F::zero(), |acc, &e| acc + (e - mu) * (e - mu)) / mf;
                let is = F::one() / (var + eps).sqrt();
                inv_std[[b, ch]] = is;
                Zip::from(xhat.slice_mut(s![b, ch, .., ..]))
                    .and(v)
                    .for_each(|xh, &xv| *xh = (xv - mu) * is);
            }
        }
        if train {
            let y = xhat.clone();
            self.cache = Some(InCache { xhat, inv_std });
            y
        } else {
            self.cache = None;
            xhat
        }
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let cache = self.cache.as_ref().expect("instance norm backward before forward");
        let (n, c, h, w) = grad_out.dim();
        let mf = F::from_f64((h * w) as f64);
        let mut grad_in = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let is = cache.inv_std[[b, ch]];
                let mut s1 = F::zero();
                let mut s2 = F::zero();
                Zip::from(grad_out.slice(s![b, ch, .., ..]))
                    .and(cache.xhat.slice(s![b, ch, .., ..]))
                    .for_each(|&go, &xh| {
                        s1 += go;
                        s2 += go * xh;
                    });
                Zip::from(grad_in.slice_mut(s![b, ch, .., ..]))
                    .and(grad_out.slice(s![b, ch, .., ..]))
                    .and(cache.xhat.slice(s![b, ch, .., ..]))
                    .for_each(|gi, &go, &xh| {
                        *gi = is / mf * (mf * go - s1 - xh * s2);
                    });
            }
        }
        grad_in
    }
}
