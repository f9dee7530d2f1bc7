//! Adam optimizer with bias-corrected moment estimates.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use super::{ParamTree, Scalar};

/// Adam with per-parameter first/second moment state, keyed by the parameter
/// path so state survives checkpointing and reload.
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Number of completed steps (drives bias correction).
    pub t: u64,
    /// First moment per parameter path.
    pub m: BTreeMap<String, ArrayD<F>>,
    /// Second moment per parameter path.
    pub v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr: F::from_f64(lr),
            beta1: F::from_f64(beta1),
            beta2: F::from_f64(beta2),
            eps: F::from_f64(1e-8),
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update using the gradients currently accumulated in `tree`.
    /// Gradients are left untouched; callers zero them between iterations.
    pub fn step(&mut self, tree: &mut dyn ParamTree<F>) {
        self.t += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let t = self.t as i32;
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        tree.visit_params("", &mut |path, p| {
            let m = m_map
                .entry(path.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = v_map
                .entry(path.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}
