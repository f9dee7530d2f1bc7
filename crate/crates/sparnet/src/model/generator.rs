//! The full generator: entry conv, a chain of face attention units running
//! input side -> side / 2^n_down -> side, and an exit conv back to RGB.

use ndarray::Array4;

use super::{Fau, ModelConfig};
use crate::nn::{join, Conv2d, Layer, ParamTree, ParamVisitor, Scalar, StateVisitor};
use crate::seed::{derive_rng, STREAM_INIT};
use crate::{Error, Result};

pub struct Generator<F: Scalar> {
    cfg: ModelConfig,
    entry: Conv2d<F>,
    units: Vec<Fau<F>>,
    exit: Conv2d<F>,
}

impl<F: Scalar> Generator<F> {
    /// Build with freshly initialised weights; the same `seed` and config
    /// always produce identical parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[STREAM_INIT]);
        let entry = Conv2d::new(3, cfg.base_channels, 3, 1, 1, 0.25, &mut rng);
        let units = cfg
            .unit_layout()
            .into_iter()
            .enumerate()
            .map(|(j, (mode, out_side))| {
                Fau::new(
                    mode,
                    cfg.base_channels,
                    cfg.att_channels,
                    out_side,
                    cfg.bottleneck_size,
                    cfg.attention_enabled(j),
                    &mut rng,
                )
            })
            .collect();
        let exit = Conv2d::new(cfg.base_channels, 3, 3, 1, 1, 0.0, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            entry,
            units,
            exit,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn units(&self) -> &[Fau<F>] {
        &self.units
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.cfg.hr_side || w != self.cfg.hr_side {
            return Err(Error::Contract(format!(
                "generator expects (n, 3, {s}, {s}) input, got (_, {c}, {h}, {w})",
                s = self.cfg.hr_side
            )));
        }
        Ok(())
    }

    /// Forward pass. Output is unclamped; inference callers clamp to [0,1].
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut cur = self.entry.forward(x, train);
        for unit in &mut self.units {
            cur = unit.forward(&cur, train);
        }
        Ok(self.exit.forward(&cur, train))
    }

    /// Forward pass that also returns every enabled unit's attention map in
    /// forward order, each `(n, 1, h_j, w_j)` at that unit's resolution.
    pub fn forward_with_maps(
        &mut self,
        x: &Array4<F>,
        train: bool,
    ) -> Result<(Array4<F>, Vec<Array4<F>>)> {
        let out = self.forward(x, train)?;
        let maps = self
            .units
            .iter()
            .filter_map(|u| u.last_alpha.clone())
            .collect();
        Ok((out, maps))
    }

    /// Backward pass for the most recent training-mode forward; accumulates
    /// parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let mut cur = self.exit.backward(grad_out);
        for unit in self.units.iter_mut().rev() {
            cur = unit.backward(&cur);
        }
        self.entry.backward(&cur)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&mut self) -> usize {
        crate::nn::count_params(self)
    }

    /// `(depth, bottleneck side)` per enabled attention branch, forward order.
    pub fn attention_shapes(&self) -> Vec<(usize, usize)> {
        self.units
            .iter()
            .filter_map(|u| u.attention())
            .map(|b| (b.depth(), b.bottleneck_side()))
            .collect()
    }
}

impl<F: Scalar> ParamTree<F> for Generator<F> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        self.entry.visit_params(&join(prefix, "entry"), f);
        for (j, unit) in self.units.iter_mut().enumerate() {
            unit.visit_params(&join(prefix, &format!("fau{j:02}")), f);
        }
        self.exit.visit_params(&join(prefix, "exit"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: StateVisitor<F>) {
        for (j, unit) in self.units.iter_mut().enumerate() {
            unit.visit_state(&join(prefix, &format!("fau{j:02}")), f);
        }
    }
}
