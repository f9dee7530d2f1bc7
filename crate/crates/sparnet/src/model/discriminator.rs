//! Patch discriminators at three scales.
//!
//! Each scale uses the same topology: four stride-2 3x3 convolutions
//! (instance-normalised except the first, leaky-ReLU activations) and a
//! final 3x3 score convolution whose output map is averaged into one score
//! per image. The post-activation output of every strided block plus the
//! score map form the five feature taps used by the feature-matching loss.

use ndarray::{Array1, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    join, Conv2d, InstanceNorm2d, Layer, LeakyRelu, ParamTree, ParamVisitor, Scalar, Sequential,
    StateVisitor,
};
use crate::seed::{derive_rng, STREAM_INIT};
use crate::{Error, Result};

const N_STRIDED: usize = 4;
const LEAK: f64 = 0.2;

pub struct Discriminator<F: Scalar> {
    blocks: Vec<Sequential<F>>,
    score: Conv2d<F>,
    input_side: usize,
    /// Tap activations from the last training-mode forward, in tap order
    /// (four block outputs, then the score map).
    taps: Vec<Array4<F>>,
}

impl<F: Scalar> Discriminator<F> {
    /// Standard width: channels 64 -> 128 -> 256 -> 512.
    pub fn new(input_side: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_base(input_side, 64, rng)
    }

    /// Narrow variant for tests; channel progression base * {1, 2, 4, 8}.
    ///
    /// The side must be at least 32 so the deepest (instance-normalised)
    /// feature map keeps more than one pixel.
    pub fn with_base(input_side: usize, base: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(input_side >= 1 << (N_STRIDED + 1), "input side {input_side} too small");
        let mut blocks = Vec::with_capacity(N_STRIDED);
        let mut in_c = 3;
        let mut out_c = base;
        for i in 0..N_STRIDED {
            let mut block = Sequential::new();
            block.push("conv", Conv2d::<F>::new(in_c, out_c, 3, 2, 1, LEAK, rng));
            if i > 0 {
                block.push("norm", InstanceNorm2d::new());
            }
            block.push("act", LeakyRelu::new(LEAK));
            blocks.push(block);
            in_c = out_c;
            out_c = (out_c * 2).min(base * 8);
        }
        let score = Conv2d::new(in_c, 1, 3, 1, 1, 0.0, rng);
        Self {
            blocks,
            score,
            input_side,
            taps: Vec::new(),
        }
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    /// Number of feature taps per forward pass.
    pub fn tap_count(&self) -> usize {
        N_STRIDED + 1
    }

    /// Returns one unbounded score per image and the tap activations.
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<(Array1<F>, Vec<Array4<F>>)> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.input_side || w != self.input_side {
            return Err(Error::Contract(format!(
                "discriminator expects (n, 3, {s}, {s}) input, got (_, {c}, {h}, {w})",
                s = self.input_side
            )));
        }
        let mut taps = Vec::with_capacity(self.tap_count());
        let mut cur = x.clone();
        for block in &mut self.blocks {
            cur = block.forward(&cur, train);
            taps.push(cur.clone());
        }
        let score_map = self.score.forward(&cur, train);
        taps.push(score_map.clone());

        let (n, _, sh, sw) = score_map.dim();
        let area = F::from_f64((sh * sw) as f64);
        let scores = Array1::from_shape_fn(n, |i| {
            score_map.index_axis(ndarray::Axis(0), i).sum() / area
        });
        self.taps = if train { taps.clone() } else { Vec::new() };
        Ok((scores, taps))
    }

    /// Backward for the last training-mode forward. `grad_scores` is the
    /// loss gradient w.r.t. the per-image scores; `tap_grads`, when given,
    /// adds gradients flowing into each tap (feature-matching path) and must
    /// list one array per tap. Accumulates parameter gradients and returns
    /// the gradient w.r.t. the input image.
    pub fn backward(
        &mut self,
        grad_scores: &Array1<F>,
        tap_grads: Option<&[Array4<F>]>,
    ) -> Array4<F> {
        assert!(!self.taps.is_empty(), "discriminator backward before forward");
        if let Some(tg) = tap_grads {
            assert_eq!(tg.len(), self.tap_count(), "need one gradient per tap");
        }
        let score_map_dim = self.taps[N_STRIDED].dim();
        let (n, _, sh, sw) = score_map_dim;
        assert_eq!(grad_scores.len(), n);
        let area = F::from_f64((sh * sw) as f64);
        // Mean over the score map spreads each score gradient uniformly.
        let mut g_map = Array4::from_shape_fn(score_map_dim, |(b, _, _, _)| {
            grad_scores[b] / area
        });
        if let Some(tg) = tap_grads {
            g_map += &tg[N_STRIDED];
        }
        let mut cur = self.score.backward(&g_map);
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            if let Some(tg) = tap_grads {
                cur += &tg[i];
            }
            cur = block.backward(&cur);
        }
        cur
    }
}

impl<F: Scalar> ParamTree<F> for Discriminator<F> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.score.visit_params(&join(prefix, "score"), f);
    }
}

/// Discriminators at full, half, and quarter resolution.
pub struct DiscriminatorStack<F: Scalar> {
    pub scales: Vec<Discriminator<F>>,
    base: usize,
}

impl<F: Scalar> DiscriminatorStack<F> {
    pub fn new(hr_side: usize, seed: u64) -> Result<Self> {
        Self::with_base(hr_side, 64, seed)
    }

    pub fn with_base(hr_side: usize, base: usize, seed: u64) -> Result<Self> {
        if hr_side % 4 != 0 || hr_side / 4 < 1 << (N_STRIDED + 1) {
            return Err(Error::Config(format!(
                "discriminator stack needs hr_side divisible by 4 and at least {}, got {hr_side}",
                4 << (N_STRIDED + 1)
            )));
        }
        let mut rng = derive_rng(seed, &[STREAM_INIT, 0xD15C]);
        let scales = (0..3)
            .map(|k| Discriminator::with_base(hr_side >> k, base, &mut rng))
            .collect();
        Ok(Self { scales, base })
    }

    pub fn hr_side(&self) -> usize {
        self.scales[0].input_side()
    }

    pub fn base_channels(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

impl<F: Scalar> ParamTree<F> for DiscriminatorStack<F> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        for (k, d) in self.scales.iter_mut().enumerate() {
            d.visit_params(&join(prefix, &format!("d{}", k + 1)), f);
        }
    }

    fn visit_state(&mut self, _prefix: &str, _f: StateVisitor<F>) {}
}
