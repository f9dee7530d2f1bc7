//! 2-D convolution via im2col + matrix multiply.
//!
//! The forward pass caches only its input; the backward pass recomputes the
//! column matrix per sample. Batch samples are processed in parallel, but
//! parameter gradients are reduced in sample order so results do not depend
//! on thread scheduling.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, Axis, ArrayView2, ArrayView3, Ix1};
use rand_chacha::ChaCha8Rng;

use super::{kaiming_normal, Layer, Param, ParamVisitor, Scalar};

/// Convolution with zero padding and square kernels.
pub struct Conv2d<F: Scalar> {
    /// Kernel, shape `(out_c, in_c, k, k)`.
    pub weight: Param<F>,
    /// Per-output-channel offset, shape `(out_c,)`.
    pub bias: Param<F>,
    stride: usize,
    padding: usize,
    cache: Option<Array4<F>>,
}

impl<F: Scalar> Conv2d<F> {
    /// Kaiming-initialised convolution; `neg_slope` is the slope of the
    /// rectifier that follows this layer (0.25 for PReLU, 0.2 for leaky
    /// ReLU, 0.0 for plain ReLU).
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        neg_slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let weight = kaiming_normal(rng, &[out_c, in_c, k, k], fan_in, neg_slope);
        let bias = ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_c]));
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            padding,
            cache: None,
        }
    }

    /// Build from explicit tensors (used by tests with hand-picked kernels).
    pub fn from_parts(weight: Array4<F>, bias: Array1<F>, stride: usize, padding: usize) -> Self {
        Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(bias.into_dyn()),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel()) / self.stride + 1
    }
}

impl<F: Scalar> Layer<F> for Conv2d<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, in_c, h, w) = x.dim();
        assert_eq!(in_c, self.in_channels(), "conv input channel mismatch");
        let k = self.kernel();
        assert!(
            h + 2 * self.padding >= k && w + 2 * self.padding >= k,
            "conv input {h}x{w} smaller than kernel {k} with padding {}",
            self.padding
        );
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let out_c = self.out_channels();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();

        let mut out = Array4::zeros((n, out_c, oh, ow));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut o, xs)| {
                let cols = im2col(xs, k, self.stride, self.padding, oh, ow);
                let prod = w2.dot(&cols);
                let mut o2 = o
                    .view_mut()
                    .into_shape_with_order((out_c, oh * ow))
                    .unwrap();
                o2.assign(&prod);
                for (mut row, &b) in o2.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row.mapv_inplace(|v| v + b);
                }
            });

        self.cache = if train { Some(x.clone()) } else { None };
        out
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let x = self.cache.as_ref().expect("conv backward before forward");
        let (n, in_c, h, w) = x.dim();
        let (gn, out_c, oh, ow) = grad_out.dim();
        assert_eq!(gn, n, "conv grad batch mismatch");
        assert_eq!(out_c, self.out_channels());
        let k = self.kernel();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");

        // Per-sample contributions, computed in parallel; `collect` keeps
        // sample order so the sequential reduction below is deterministic.
        let parts: Vec<(Array2<F>, Array1<F>, Array3<F>)> = x
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(grad_out.axis_iter(Axis(0)).into_par_iter())
            .map(|(xs, gs)| {
                let g2 = gs.into_shape_with_order((out_c, oh * ow)).unwrap();
                let cols = im2col(xs, k, self.stride, self.padding, oh, ow);
                let gw = g2.dot(&cols.t());
                let gb = g2.sum_axis(Axis(1));
                let gcols = w2.t().dot(&g2);
                let gx = col2im(gcols.view(), in_c, h, w, k, self.stride, self.padding, oh, ow);
                (gw, gb, gx)
            })
            .collect();

        let mut grad_in = Array4::zeros((n, in_c, h, w));
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((out_c, in_c * k * k))
                .unwrap();
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (i, (gw, gb, gx)) in parts.into_iter().enumerate() {
                wg += &gw;
                bg += &gb;
                grad_in.slice_mut(s![i, .., .., ..]).assign(&gx);
            }
        }
        grad_in
    }

    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        f(&super::join(prefix, "weight"), &mut self.weight);
        f(&super::join(prefix, "bias"), &mut self.bias);
    }
}

/// Unfold one sample into a `(in_c * k * k, oh * ow)` column matrix.
fn im2col<F: Scalar>(
    x: ArrayView3<F>,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (in_c, h, w) = x.dim();
    let mut cols = Array2::zeros((in_c * k * k, oh * ow));
    for ic in 0..in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let mut dst_row = cols.row_mut(row);
                let dst = dst_row.as_slice_mut().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ic, iy as usize, ..]);
                    let src = src.as_slice().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column-matrix gradient back onto input pixels.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array3<F> {
    let mut out = Array3::zeros((in_c, h, w));
    for ic in 0..in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let src_row = cols.row(row);
                let src = src_row.as_slice().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst_row = out.slice_mut(s![ic, iy as usize, ..]);
                    let dst = dst_row.as_slice_mut().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Ix4};

    /// Reference convolution evaluated with plain nested loops.
    fn conv_naive(
        x: &Array4<f64>,
        weight: &Array4<f64>,
        bias: &Array1<f64>,
        stride: usize,
        padding: usize,
    ) -> Array4<f64> {
        let (n, in_c, h, w) = x.dim();
        let (out_c, _, k, _) = weight.dim();
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = Array4::zeros((n, out_c, oh, ow));
        for s in 0..n {
            for oc in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc];
                        for ic in 0..in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[[s, ic, iy as usize, ix as usize]]
                                            * weight[[oc, ic, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[s, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = crate::seed::derive_rng(7, &[1]);
        for &(stride, padding, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 1, 4)] {
            let mut conv: Conv2d<f64> = Conv2d::new(3, 5, k, stride, padding, 0.0, &mut rng);
            let x = Array4::from_shape_fn((2, 3, 9, 9), |(a, b, c, d)| {
                ((a * 131 + b * 17 + c * 5 + d) % 23) as f64 / 23.0 - 0.4
            });
            let got = conv.forward(&x, false);
            let weight = conv.weight.value.clone().into_dimensionality::<Ix4>().unwrap();
            let bias = conv.bias.value.clone().into_dimensionality::<Ix1>().unwrap();
            let want = conv_naive(&x, &weight, &bias, stride, padding);
            assert_eq!(got.dim(), want.dim());
            for (g, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let weight = array![[[[1.0f64]]]];
        let bias = array![0.0];
        let mut conv = Conv2d::from_parts(weight, bias, 1, 0);
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, z)| (y * 4 + z) as f64);
        let y = conv.forward(&x, false);
        assert_eq!(x, y);
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let mut rng = crate::seed::derive_rng(3, &[2]);
        let mut conv: Conv2d<f32> = Conv2d::new(4, 6, 3, 2, 1, 0.0, &mut rng);
        let x = Array4::zeros((1, 4, 16, 16));
        let y = conv.forward(&x, false);
        assert_eq!(y.dim(), (1, 6, 8, 8));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::nn::{finite_difference_check, ParamTree};

        struct Wrap(Conv2d<f64>, Array4<f64>);
        impl ParamTree<f64> for Wrap {
            fn visit_params(&mut self, prefix: &str, f: crate::nn::ParamVisitor<f64>) {
                self.0.visit_params(prefix, f);
            }
        }

        let mut rng = crate::seed::derive_rng(11, &[3]);
        let conv: Conv2d<f64> = Conv2d::new(2, 3, 3, 2, 1, 0.0, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |(a, b, c, d)| {
            ((a * 7 + b * 13 + c * 3 + d * 11) % 19) as f64 / 19.0 - 0.5
        });
        let mut wrap = Wrap(conv, x);

        // Analytic pass: d(sum of squares)/dparams.
        let y = wrap.0.forward(&wrap.1.clone(), true);
        wrap.0.backward(&y.mapv(|v| 2.0 * v));
        let report = finite_difference_check(
            &mut wrap,
            |w| w.0.forward(&w.1.clone(), false).mapv(|v| v * v).sum(),
            1e-5,
            1e-8,
            1,
        );
        assert!(
            report.max_rel_error < 1e-6,
            "conv finite-difference mismatch: {}",
            report.worst
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = crate::seed::derive_rng(13, &[4]);
        let mut conv: Conv2d<f64> = Conv2d::new(2, 2, 3, 1, 1, 0.0, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, b, c, d)| {
            ((b * 5 + c * 7 + d) % 11) as f64 / 11.0 - 0.3
        });
        let y = conv.forward(&x, true);
        let gin = conv.backward(&y.mapv(|v| 2.0 * v));

        let eps = 1e-6;
        for probe in [(0usize, 0usize, 1usize, 2usize), (0, 1, 3, 0), (0, 1, 0, 3)] {
            let mut xp = x.clone();
            xp[probe] += eps;
            let lp: f64 = conv.forward(&xp, false).mapv(|v| v * v).sum();
            let mut xm = x.clone();
            xm[probe] -= eps;
            let lm: f64 = conv.forward(&xm, false).mapv(|v| v * v).sum();
            let numeric = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(gin[probe], numeric, epsilon = 1e-6);
        }
    }
}
