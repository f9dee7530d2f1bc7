//! Minimal CNN layer stack with explicit backward passes.
//!
//! Layers are generic over [`Scalar`] so the same code trains in `f32` and
//! verifies gradients against central finite differences in `f64`. Each layer
//! caches whatever its backward pass needs during `forward(.., train=true)`;
//! a `backward` call must follow the matching forward. Parameter gradients
//! accumulate across backward calls until [`zero_grads`] or an optimizer step.

mod act;
mod adam;
mod conv;
mod init;
mod norm;
mod resample;

pub use act::{LeakyRelu, PRelu, Relu, Sigmoid};
pub use adam::Adam;
pub use conv::Conv2d;
pub use init::kaiming_normal;
pub use norm::{BatchNorm2d, InstanceNorm2d};
pub use resample::{AvgPool2, MaxPool2, NearestUp2};

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{Array4, ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

/// Floating-point element type usable by every layer.
pub trait Scalar:
    Float + NumAssign + ScalarOperand + LinalgScalar + Sum + Send + Sync + Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Callback visiting every trainable parameter with a hierarchical path.
pub type ParamVisitor<'a, 'b, F> = &'a mut (dyn FnMut(&str, &mut Param<F>) + 'b);

/// Callback visiting non-trainable state (e.g. batch-norm running stats).
pub type StateVisitor<'a, 'b, F> = &'a mut (dyn FnMut(&str, &mut ArrayD<F>) + 'b);

/// A differentiable map from one feature tensor to another.
///
/// `forward` with `train = true` records caches; `backward` consumes them and
/// both accumulates parameter gradients and returns the input gradient.
pub trait Layer<F: Scalar> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F>;
    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F>;
    fn visit_params(&mut self, _prefix: &str, _f: ParamVisitor<F>) {}
    fn visit_state(&mut self, _prefix: &str, _f: StateVisitor<F>) {}
}

/// Join a path prefix and a component.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything exposing a parameter/state tree. Implemented by whole models.
pub trait ParamTree<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>);
    fn visit_state(&mut self, _prefix: &str, _f: StateVisitor<F>) {}
}

/// Zero every parameter gradient in a tree.
pub fn zero_grads<F: Scalar>(tree: &mut dyn ParamTree<F>) {
    tree.visit_params("", &mut |_, p| p.zero_grad());
}

/// Total number of trainable scalars in a tree.
pub fn count_params<F: Scalar>(tree: &mut dyn ParamTree<F>) -> usize {
    let mut n = 0;
    tree.visit_params("", &mut |_, p| n += p.len());
    n
}

/// An ordered chain of boxed layers with per-layer names.
pub struct Sequential<F: Scalar> {
    layers: Vec<(String, Box<dyn Layer<F>>)>,
}

impl<F: Scalar> Sequential<F> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<F> + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<F: Scalar> Default for Sequential<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Sequential<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let mut cur = x.clone();
        for (_, layer) in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let mut cur = grad_out.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        for (name, layer) in &mut self.layers {
            layer.visit_params(&join(prefix, name), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: StateVisitor<F>) {
        for (name, layer) in &mut self.layers {
            layer.visit_state(&join(prefix, name), f);
        }
    }
}

/// Central finite-difference gradient check over the parameters of a tree.
///
/// `loss` must be a deterministic function of the current parameter values,
/// and analytic gradients must already be accumulated (one backward pass)
/// before calling. Every `sample_every`-th scalar of each parameter is
/// probed; pass 1 to probe all of them. Returns the maximum relative error,
/// where relative error uses `|a - n| / max(|a|, |n|, floor)` so near-zero
/// gradients do not blow up the ratio.
pub fn finite_difference_check<F, L, M>(
    model: &mut M,
    mut loss: L,
    step: F,
    floor: F,
    sample_every: usize,
) -> FdReport
where
    F: Scalar,
    M: ParamTree<F>,
    L: FnMut(&mut M) -> F,
{
    assert!(sample_every >= 1);
    let mut entries: Vec<(String, usize)> = Vec::new();
    model.visit_params("", &mut |path, p| entries.push((path.to_string(), p.len())));

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for (path, len) in entries {
        for idx in (0..len).step_by(sample_every) {
            let mut analytic = F::zero();
            nudge(model, &path, idx, step, &mut analytic);
            let plus = loss(model);
            nudge(model, &path, idx, -(step + step), &mut analytic);
            let minus = loss(model);
            nudge(model, &path, idx, step, &mut analytic);
            let numeric = (plus - minus).into_f64() / (2.0 * step.into_f64());
            let a = analytic.into_f64();
            let denom = a.abs().max(numeric.abs()).max(floor.into_f64());
            let rel = (a - numeric).abs() / denom;
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{path}[{idx}]: analytic {a:.3e} vs numeric {numeric:.3e}");
            }
        }
    }
    FdReport {
        max_rel_error: max_rel,
        checked,
        worst,
    }
}

fn nudge<F: Scalar, M: ParamTree<F>>(
    model: &mut M,
    path: &str,
    idx: usize,
    delta: F,
    analytic_out: &mut F,
) {
    model.visit_params("", &mut |p, param| {
        if p == path {
            let v = param.value.as_slice_mut().expect("contiguous param");
            v[idx] += delta;
            *analytic_out = param.grad.as_slice().expect("contiguous grad")[idx];
        }
    });
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: String,
}
