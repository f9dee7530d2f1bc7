//! Training objectives.
//!
//! The base model trains on pixel-space L2 alone. The HD model combines
//! pixel L1, hinge adversarial, discriminator feature matching, and a
//! perceptual loss over a frozen feature extractor; `total_g_loss` applies
//! the published weights. Every loss comes in a value form and a
//! value-plus-gradient form, with gradients taken w.r.t. the first
//! (super-resolved) argument. Spatial means are per element so the weights
//! are resolution-independent.

use ndarray::{Array1, Array4, Zip};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, Layer, MaxPool2, ParamVisitor, Relu, Scalar};
use crate::seed::derive_rng;
use crate::{Error, Result};

/// Weights of the four generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pixel: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 100.0,
            adversarial: 1.0,
            feature_matching: 10.0,
            perceptual: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pixel,
            self.adversarial,
            self.feature_matching,
            self.perceptual,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// The four generator loss components, unweighted.
#[derive(Debug, Clone, Copy)]
pub struct GLossTerms<F> {
    pub pixel: F,
    pub adversarial: F,
    pub feature_matching: F,
    pub perceptual: F,
}

/// Weighted sum of the generator loss components.
pub fn total_g_loss<F: Scalar>(terms: &GLossTerms<F>, w: &LossWeights) -> F {
    F::from_f64(w.pixel) * terms.pixel
        + F::from_f64(w.adversarial) * terms.adversarial
        + F::from_f64(w.feature_matching) * terms.feature_matching
        + F::from_f64(w.perceptual) * terms.perceptual
}

fn assert_same_shape<F: Scalar>(a: &Array4<F>, b: &Array4<F>) {
    assert_eq!(a.dim(), b.dim(), "loss arguments must have matching shapes");
}

/// Mean squared difference over every element.
pub fn pixel_l2<F: Scalar>(sr: &Array4<F>, hr: &Array4<F>) -> F {
    assert_same_shape(sr, hr);
    let count = F::from_f64(sr.len() as f64);
    Zip::from(sr)
        .and(hr)
        .fold(F::zero(), |acc, &a, &b| acc + (a - b) * (a - b))
        / count
}

/// L2 loss and its gradient w.r.t. `sr`: `2 (sr - hr) / count`.
pub fn pixel_l2_grad<F: Scalar>(sr: &Array4<F>, hr: &Array4<F>) -> (F, Array4<F>) {
    let loss = pixel_l2(sr, hr);
    let scale = F::from_f64(2.0 / sr.len() as f64);
    let grad = Zip::from(sr).and(hr).map_collect(|&a, &b| (a - b) * scale);
    (loss, grad)
}

/// Mean absolute difference over every element.
pub fn pixel_l1<F: Scalar>(sr: &Array4<F>, hr: &Array4<F>) -> F {
    assert_same_shape(sr, hr);
    let count = F::from_f64(sr.len() as f64);
    Zip::from(sr)
        .and(hr)
        .fold(F::zero(), |acc, &a, &b| acc + (a - b).abs())
        / count
}

/// L1 loss and its (sub)gradient w.r.t. `sr`: `sign(sr - hr) / count`.
pub fn pixel_l1_grad<F: Scalar>(sr: &Array4<F>, hr: &Array4<F>) -> (F, Array4<F>) {
    let loss = pixel_l1(sr, hr);
    let scale = F::from_f64(1.0 / sr.len() as f64);
    let grad = Zip::from(sr).and(hr).map_collect(|&a, &b| {
        if a > b {
            scale
        } else if a < b {
            -scale
        } else {
            F::zero()
        }
    });
    (loss, grad)
}

fn check_score_lists<F: Scalar>(a: &[Array1<F>], b: &[Array1<F>]) -> usize {
    assert!(!a.is_empty(), "need at least one discriminator scale");
    assert_eq!(a.len(), b.len(), "scale count mismatch");
    let n = a[0].len();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.len(), n, "batch size mismatch across scales");
        assert_eq!(y.len(), n, "batch size mismatch across scales");
    }
    n
}

/// Discriminator hinge loss: per image and scale,
/// `max(0, 1 - real) + max(0, 1 + fake)`, summed over scales, batch-averaged.
pub fn hinge_d_loss<F: Scalar>(real_scores: &[Array1<F>], fake_scores: &[Array1<F>]) -> F {
    let n = check_score_lists(real_scores, fake_scores);
    let one = F::one();
    let mut total = F::zero();
    for (real, fake) in real_scores.iter().zip(fake_scores.iter()) {
        for (&r, &f) in real.iter().zip(fake.iter()) {
            total += (one - r).max(F::zero()) + (one + f).max(F::zero());
        }
    }
    total / F::from_f64(n as f64)
}

/// Hinge loss and its gradients w.r.t. the real and fake scores.
#[allow(clippy::type_complexity)]
pub fn hinge_d_grad<F: Scalar>(
    real_scores: &[Array1<F>],
    fake_scores: &[Array1<F>],
) -> (F, Vec<Array1<F>>, Vec<Array1<F>>) {
    let n = check_score_lists(real_scores, fake_scores);
    let loss = hinge_d_loss(real_scores, fake_scores);
    let inv_n = F::from_f64(1.0 / n as f64);
    let one = F::one();
    let real_grads = real_scores
        .iter()
        .map(|r| r.mapv(|v| if v < one { -inv_n } else { F::zero() }))
        .collect();
    let fake_grads = fake_scores
        .iter()
        .map(|f| f.mapv(|v| if v > -one { inv_n } else { F::zero() }))
        .collect();
    (loss, real_grads, fake_grads)
}

/// Generator adversarial loss: `-sum_k D_k(sr)`, batch-averaged.
pub fn hinge_g_loss<F: Scalar>(fake_scores: &[Array1<F>]) -> F {
    assert!(!fake_scores.is_empty(), "need at least one discriminator scale");
    let n = fake_scores[0].len();
    let mut total = F::zero();
    for fake in fake_scores {
        assert_eq!(fake.len(), n, "batch size mismatch across scales");
        total += fake.sum();
    }
    -total / F::from_f64(n as f64)
}

/// Generator adversarial loss and its gradient w.r.t. every fake score
/// (constant `-1/n`).
pub fn hinge_g_grad<F: Scalar>(fake_scores: &[Array1<F>]) -> (F, Vec<Array1<F>>) {
    let loss = hinge_g_loss(fake_scores);
    let n = fake_scores[0].len();
    let g = -F::from_f64(1.0 / n as f64);
    let grads = fake_scores
        .iter()
        .map(|f| Array1::from_elem(f.len(), g))
        .collect();
    (loss, grads)
}

fn check_feature_lists<F: Scalar>(a: &[Vec<Array4<F>>], b: &[Vec<Array4<F>>]) -> usize {
    assert!(!a.is_empty(), "need at least one scale of features");
    assert_eq!(a.len(), b.len(), "scale count mismatch");
    let n = a[0][0].dim().0;
    for (sa, sb) in a.iter().zip(b.iter()) {
        assert_eq!(sa.len(), sb.len(), "layer count mismatch");
        for (fa, fb) in sa.iter().zip(sb.iter()) {
            assert_eq!(fa.dim(), fb.dim(), "feature shape mismatch");
            assert_eq!(fa.dim().0, n, "batch size mismatch");
        }
    }
    n
}

/// Per-sample element count of a feature map (channels x height x width).
fn per_sample_elements<F: Scalar>(f: &Array4<F>) -> f64 {
    let (_, c, h, w) = f.dim();
    (c * h * w) as f64
}

/// Feature-matching loss over discriminator taps:
/// `sum_k sum_l (1 / M_kl) * l1(f_kl(sr), f_kl(hr))`, batch-averaged, where
/// `M_kl` is the per-sample element count of that tap.
pub fn feature_matching<F: Scalar>(sr_feats: &[Vec<Array4<F>>], hr_feats: &[Vec<Array4<F>>]) -> F {
    let n = check_feature_lists(sr_feats, hr_feats);
    let mut total = F::zero();
    for (scale_sr, scale_hr) in sr_feats.iter().zip(hr_feats.iter()) {
        for (fs, fh) in scale_sr.iter().zip(scale_hr.iter()) {
            let m = F::from_f64(per_sample_elements(fs));
            let l1 = Zip::from(fs)
                .and(fh)
                .fold(F::zero(), |acc, &a, &b| acc + (a - b).abs());
            total += l1 / m;
        }
    }
    total / F::from_f64(n as f64)
}

/// Feature-matching loss and its gradients w.r.t. the `sr` features only;
/// the real-image features act as a fixed reference.
#[allow(clippy::type_complexity)]
pub fn feature_matching_grad<F: Scalar>(
    sr_feats: &[Vec<Array4<F>>],
    hr_feats: &[Vec<Array4<F>>],
) -> (F, Vec<Vec<Array4<F>>>) {
    let n = check_feature_lists(sr_feats, hr_feats);
    let loss = feature_matching(sr_feats, hr_feats);
    let inv_n = 1.0 / n as f64;
    let grads = sr_feats
        .iter()
        .zip(hr_feats.iter())
        .map(|(scale_sr, scale_hr)| {
            scale_sr
                .iter()
                .zip(scale_hr.iter())
                .map(|(fs, fh)| {
                    let scale = F::from_f64(inv_n / per_sample_elements(fs));
                    Zip::from(fs).and(fh).map_collect(|&a, &b| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            F::zero()
                        }
                    })
                })
                .collect()
        })
        .collect();
    (loss, grads)
}

/// Topology of a perceptual feature extractor, stored alongside its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Channel width per stage.
    pub widths: Vec<usize>,
    /// Convolution count per stage.
    pub convs: Vec<usize>,
    /// Per-channel input normalization applied before the first layer.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ExtractorConfig {
    /// Narrow five-stage layout in the style of a deep classification
    /// backbone: stage convs 2/2/4/4/4, one tap per stage, 2x max-pool
    /// between stages.
    pub fn test_double() -> Self {
        Self {
            widths: vec![8, 16, 32, 48, 48],
            convs: vec![2, 2, 4, 4, 4],
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.convs.len() {
            return Err(Error::Config(
                "extractor needs equal, non-empty widths and convs lists".into(),
            ));
        }
        if self.widths.iter().any(|w| *w == 0) || self.convs.iter().any(|c| *c == 0) {
            return Err(Error::Config("extractor widths and convs must be positive".into()));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("extractor std entries must be positive".into()));
        }
        Ok(())
    }

    /// Minimum input side: each stage after the first follows a 2x pool.
    pub fn min_side(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

enum PcpLayer<F: Scalar> {
    Conv(Conv2d<F>),
    Relu(Relu<F>),
    Pool(MaxPool2<F>),
}

impl<F: Scalar> PcpLayer<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        match self {
            PcpLayer::Conv(l) => l.forward(x, train),
            PcpLayer::Relu(l) => l.forward(x, train),
            PcpLayer::Pool(l) => l.forward(x, train),
        }
    }

    fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        match self {
            PcpLayer::Conv(l) => l.backward(g),
            PcpLayer::Relu(l) => l.backward(g),
            PcpLayer::Pool(l) => l.backward(g),
        }
    }
}

/// Frozen convolutional feature extractor with one tap per stage.
///
/// Weights come either from a checkpoint container or from a seeded random
/// draw (the deterministic test double); no optimizer ever touches them.
pub struct PerceptualExtractor<F: Scalar> {
    cfg: ExtractorConfig,
    layers: Vec<(String, PcpLayer<F>)>,
    /// Indices into `layers` whose output is a tap.
    tap_at: Vec<usize>,
}

impl<F: Scalar> PerceptualExtractor<F> {
    /// Deterministic random-weights extractor: same seed, same features.
    pub fn fixed_random(cfg: &ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[crate::seed::STREAM_INIT, 0xFEA7]);
        Ok(Self::build(cfg, &mut rng))
    }

    fn build(cfg: &ExtractorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut tap_at = Vec::new();
        let mut in_c = 3;
        for (stage, (&width, &convs)) in cfg.widths.iter().zip(cfg.convs.iter()).enumerate() {
            if stage > 0 {
                layers.push((format!("s{stage}.pool"), PcpLayer::Pool(MaxPool2::new())));
            }
            for i in 0..convs {
                layers.push((
                    format!("s{stage}.conv{i}"),
                    PcpLayer::Conv(Conv2d::new(in_c, width, 3, 1, 1, 0.0, rng)),
                ));
                layers.push((format!("s{stage}.relu{i}"), PcpLayer::Relu(Relu::new())));
                in_c = width;
            }
            tap_at.push(layers.len() - 1);
        }
        Self {
            cfg: cfg.clone(),
            layers,
            tap_at,
        }
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn tap_count(&self) -> usize {
        self.tap_at.len()
    }

    fn normalize(&self, x: &Array4<F>) -> Array4<F> {
        let mut out = x.clone();
        for c in 0..3 {
            let mean = F::from_f64(self.cfg.mean[c]);
            let inv_std = F::from_f64(1.0 / self.cfg.std[c]);
            out.index_axis_mut(ndarray::Axis(1), c)
                .mapv_inplace(|v| (v - mean) * inv_std);
        }
        out
    }

    /// Tap activations for an RGB input in [0,1]-ish range.
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Vec<Array4<F>> {
        assert_eq!(x.dim().1, 3, "extractor expects RGB input");
        let side = x.dim().2.min(x.dim().3);
        assert!(
            side % self.cfg.min_side() == 0,
            "extractor input side {side} not divisible by {}",
            self.cfg.min_side()
        );
        let mut cur = self.normalize(x);
        let mut taps = Vec::with_capacity(self.tap_at.len());
        for (i, (_, layer)) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur, train);
            if self.tap_at.contains(&i) {
                taps.push(cur.clone());
            }
        }
        taps
    }

    /// Input gradient given one gradient per tap (training-mode forward
    /// required first).
    pub fn backward(&mut self, tap_grads: &[Array4<F>]) -> Array4<F> {
        assert_eq!(tap_grads.len(), self.tap_at.len(), "one gradient per tap");
        let mut cur: Option<Array4<F>> = None;
        let mut tap_iter = self.tap_at.iter().rev().peekable();
        let mut grads = tap_grads.iter().rev();
        for i in (0..self.layers.len()).rev() {
            if tap_iter.peek() == Some(&&i) {
                tap_iter.next();
                let tg = grads.next().expect("tap grad");
                cur = Some(match cur {
                    Some(c) => c + tg,
                    None => tg.clone(),
                });
            }
            if let Some(g) = cur {
                cur = Some(self.layers[i].1.backward(&g));
            }
        }
        let mut gin = cur.expect("at least one tap");
        for c in 0..3 {
            let inv_std = F::from_f64(1.0 / self.cfg.std[c]);
            gin.index_axis_mut(ndarray::Axis(1), c)
                .mapv_inplace(|v| v * inv_std);
        }
        gin
    }

    /// Visit weights for checkpointing; the extractor is not a trainable
    /// tree, so this is deliberately separate from the optimizer path.
    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        for (name, layer) in &mut self.layers {
            if let PcpLayer::Conv(conv) = layer {
                conv.visit_params(&crate::nn::join(prefix, name), f);
            }
        }
    }
}

/// Perceptual loss: mean-normalised L1 between tap activations of `sr` and
/// `hr`, summed over taps, batch-averaged.
pub fn perceptual<F: Scalar>(
    sr: &Array4<F>,
    hr: &Array4<F>,
    extractor: &mut PerceptualExtractor<F>,
) -> F {
    assert_same_shape(sr, hr);
    let taps_sr = extractor.forward(sr, false);
    let taps_hr = extractor.forward(hr, false);
    feature_matching(&[taps_sr], &[taps_hr])
}

/// Perceptual loss and its gradient w.r.t. `sr`.
pub fn perceptual_grad<F: Scalar>(
    sr: &Array4<F>,
    hr: &Array4<F>,
    extractor: &mut PerceptualExtractor<F>,
) -> (F, Array4<F>) {
    assert_same_shape(sr, hr);
    let taps_hr = extractor.forward(hr, false);
    let taps_sr = extractor.forward(sr, true);
    let (loss, grads) = feature_matching_grad(&[taps_sr], &[taps_hr]);
    let gin = extractor.backward(&grads[0]);
    (loss, gin)
}
