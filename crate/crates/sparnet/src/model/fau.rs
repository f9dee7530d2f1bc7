//! Face attention units: a pre-activation residual feature branch gated by
//! an hourglass spatial-attention branch.
//!
//! For input `x` the unit computes `f = F_feat(x)` and, when attention is
//! enabled, `alpha = sigmoid(F_att(f))`, then outputs `skip(x) + alpha * f`.
//! Plain units use an identity skip; down/up units replace it with a single
//! scale convolution that matches the changed resolution (stride-2 conv when
//! halving, nearest-neighbour upsample plus conv when doubling — upsampling
//! before the convolution sidesteps checkerboard artifacts).

use ndarray::{Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    join, BatchNorm2d, Conv2d, Layer, NearestUp2, PRelu, ParamVisitor, Scalar, Sequential,
    Sigmoid, StateVisitor,
};

/// How a unit changes spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FauMode {
    Plain,
    Down,
    Up,
}

/// Conv3x3 -> BatchNorm -> PReLU, optionally upsampling before the conv.
fn post_block<F: Scalar>(
    in_c: usize,
    out_c: usize,
    stride: usize,
    upsample: bool,
    rng: &mut ChaCha8Rng,
) -> Sequential<F> {
    let mut s = Sequential::new();
    if upsample {
        s.push("up", NearestUp2);
    }
    s.push("conv", Conv2d::new(in_c, out_c, 3, stride, 1, 0.25, rng));
    s.push("bn", BatchNorm2d::new(out_c));
    s.push("act", PRelu::default());
    s
}

/// Symmetric hourglass at a fixed width: `depth` halving stages, a two-block
/// bottleneck, and `depth` doubling stages with additive skip connections.
pub struct Hourglass<F: Scalar> {
    levels: Vec<HgLevel<F>>,
    bottleneck: Sequential<F>,
}

struct HgLevel<F: Scalar> {
    skip: Sequential<F>,
    down: Sequential<F>,
    up: Sequential<F>,
}

impl<F: Scalar> Hourglass<F> {
    pub fn new(channels: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let levels = (0..depth)
            .map(|_| {
                let mut down = Sequential::new();
                down.push("d1", post_block::<F>(channels, channels, 2, false, rng));
                down.push("d2", post_block::<F>(channels, channels, 1, false, rng));
                let mut up = Sequential::new();
                up.push("u1", post_block::<F>(channels, channels, 1, false, rng));
                up.push("u2", post_block::<F>(channels, channels, 1, true, rng));
                HgLevel {
                    skip: {
                        let mut s = Sequential::new();
                        s.push("s1", post_block::<F>(channels, channels, 1, false, rng));
                        s
                    },
                    down,
                    up,
                }
            })
            .collect();
        let mut bottleneck = Sequential::new();
        bottleneck.push("b1", post_block::<F>(channels, channels, 1, false, rng));
        bottleneck.push("b2", post_block::<F>(channels, channels, 1, false, rng));
        Self { levels, bottleneck }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

impl<F: Scalar> Layer<F> for Hourglass<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut cur = x.clone();
        for level in &mut self.levels {
            skips.push(level.skip.forward(&cur, train));
            cur = level.down.forward(&cur, train);
        }
        cur = self.bottleneck.forward(&cur, train);
        for level in self.levels.iter_mut().rev() {
            cur = skips.pop().expect("one skip per level") + level.up.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        // Mirror the forward pass: outermost level first on the way in.
        let mut skip_grads = Vec::with_capacity(self.levels.len());
        let mut cur = grad_out.clone();
        for level in &mut self.levels {
            skip_grads.push(cur.clone());
            cur = level.up.backward(&cur);
        }
        cur = self.bottleneck.backward(&cur);
        for level in self.levels.iter_mut().rev() {
            let gs = skip_grads.pop().expect("one grad per level");
            cur = level.down.backward(&cur) + level.skip.backward(&gs);
        }
        cur
    }

    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        for (i, level) in self.levels.iter_mut().enumerate() {
            let base = join(prefix, &format!("lv{i}"));
            level.skip.visit_params(&join(&base, "skip"), f);
            level.down.visit_params(&join(&base, "down"), f);
            level.up.visit_params(&join(&base, "up"), f);
        }
        self.bottleneck.visit_params(&join(prefix, "mid"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: StateVisitor<F>) {
        for (i, level) in self.levels.iter_mut().enumerate() {
            let base = join(prefix, &format!("lv{i}"));
            level.skip.visit_state(&join(&base, "skip"), f);
            level.down.visit_state(&join(&base, "down"), f);
            level.up.visit_state(&join(&base, "up"), f);
        }
        self.bottleneck.visit_state(&join(prefix, "mid"), f);
    }
}

/// Hourglass followed by a score conv and sigmoid, producing a one-channel
/// gate in (0,1) at the resolution of its input.
pub struct AttentionBranch<F: Scalar> {
    /// 1x1 entry conv, present only when the feature width differs from the
    /// hourglass width.
    adapter: Option<Conv2d<F>>,
    hourglass: Hourglass<F>,
    score: Conv2d<F>,
    sigmoid: Sigmoid<F>,
    input_side: usize,
}

impl<F: Scalar> AttentionBranch<F> {
    pub fn new(
        feature_channels: usize,
        att_channels: usize,
        input_side: usize,
        bottleneck_side: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            input_side >= bottleneck_side && input_side % bottleneck_side == 0,
            "side {input_side} cannot reach bottleneck {bottleneck_side}"
        );
        let depth = (input_side / bottleneck_side).trailing_zeros() as usize;
        let adapter = (feature_channels != att_channels)
            .then(|| Conv2d::new(feature_channels, att_channels, 1, 1, 0, 0.25, rng));
        Self {
            adapter,
            hourglass: Hourglass::new(att_channels, depth, rng),
            score: Conv2d::new(att_channels, 1, 3, 1, 1, 0.0, rng),
            sigmoid: Sigmoid::new(),
            input_side,
        }
    }

    pub fn depth(&self) -> usize {
        self.hourglass.depth()
    }

    pub fn bottleneck_side(&self) -> usize {
        self.input_side >> self.depth()
    }

    /// Returns `(logits, alpha)`, both `(n, 1, h, w)`.
    pub fn forward(&mut self, f: &Array4<F>, train: bool) -> (Array4<F>, Array4<F>) {
        let mut cur = match &mut self.adapter {
            Some(conv) => conv.forward(f, train),
            None => f.clone(),
        };
        cur = self.hourglass.forward(&cur, train);
        let logits = self.score.forward(&cur, train);
        let alpha = self.sigmoid.forward(&logits, train);
        (logits, alpha)
    }

    /// Gradient w.r.t. the branch input given the gradient w.r.t. alpha.
    pub fn backward(&mut self, grad_alpha: &Array4<F>) -> Array4<F> {
        let g = self.sigmoid.backward(grad_alpha);
        let g = self.score.backward(&g);
        let g = self.hourglass.backward(&g);
        match &mut self.adapter {
            Some(conv) => conv.backward(&g),
            None => g,
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        if let Some(conv) = &mut self.adapter {
            conv.visit_params(&join(prefix, "adapter"), f);
        }
        self.hourglass.visit_params(&join(prefix, "hg"), f);
        self.score.visit_params(&join(prefix, "score"), f);
    }

    pub fn visit_state(&mut self, prefix: &str, f: StateVisitor<F>) {
        self.hourglass.visit_state(&join(prefix, "hg"), f);
    }
}

/// Everything a unit computes in one forward pass, for inspection in tests
/// and attention-map export.
pub struct FauActivations<F> {
    pub x_prev: Array4<F>,
    /// Feature-branch output, same shape as the unit output.
    pub f: Array4<F>,
    /// Pre-sigmoid attention scores, `(n, 1, h, w)`; absent without attention.
    pub att_logits: Option<Array4<F>>,
    /// Gate in (0,1), `(n, 1, h, w)`; absent without attention.
    pub alpha: Option<Array4<F>>,
    pub x_out: Array4<F>,
}

struct FauCache<F> {
    f: Array4<F>,
    alpha: Option<Array4<F>>,
}

/// One face attention unit.
pub struct Fau<F: Scalar> {
    mode: FauMode,
    feature: Sequential<F>,
    scale: Option<Sequential<F>>,
    attention: Option<AttentionBranch<F>>,
    cache: Option<FauCache<F>>,
    /// Alpha from the most recent forward, kept for attention-map export.
    pub last_alpha: Option<Array4<F>>,
}

impl<F: Scalar> Fau<F> {
    /// `out_side` is the unit's output resolution, used to size the
    /// attention hourglass; `bottleneck_side` is ignored when
    /// `with_attention` is false.
    pub fn new(
        mode: FauMode,
        channels: usize,
        att_channels: usize,
        out_side: usize,
        bottleneck_side: usize,
        with_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Pre-activation residual feature branch: [BN -> PReLU -> Conv] x2.
        // Down units give the first conv stride 2; up units insert a
        // nearest-neighbour upsample before it.
        let mut feature = Sequential::new();
        feature.push("bn1", BatchNorm2d::<F>::new(channels));
        feature.push("act1", PRelu::<F>::default());
        if matches!(mode, FauMode::Up) {
            feature.push("upsample", NearestUp2);
        }
        let stride1 = if matches!(mode, FauMode::Down) { 2 } else { 1 };
        feature.push("conv1", Conv2d::<F>::new(channels, channels, 3, stride1, 1, 0.25, rng));
        feature.push("bn2", BatchNorm2d::<F>::new(channels));
        feature.push("act2", PRelu::<F>::default());
        feature.push("conv2", Conv2d::<F>::new(channels, channels, 3, 1, 1, 0.25, rng));

        let scale = match mode {
            FauMode::Plain => None,
            FauMode::Down => {
                let mut s = Sequential::new();
                s.push("conv", Conv2d::<F>::new(channels, channels, 3, 2, 1, 0.25, rng));
                Some(s)
            }
            FauMode::Up => {
                let mut s = Sequential::new();
                s.push("up", NearestUp2);
                s.push("conv", Conv2d::<F>::new(channels, channels, 3, 1, 1, 0.25, rng));
                Some(s)
            }
        };

        let attention = with_attention.then(|| {
            AttentionBranch::new(channels, att_channels, out_side, bottleneck_side, rng)
        });

        Self {
            mode,
            feature,
            scale,
            attention,
            cache: None,
            last_alpha: None,
        }
    }

    pub fn mode(&self) -> FauMode {
        self.mode
    }

    pub fn attention(&self) -> Option<&AttentionBranch<F>> {
        self.attention.as_ref()
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    fn skip(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        match &mut self.scale {
            Some(s) => s.forward(x, train),
            None => x.clone(),
        }
    }

    /// Forward pass keeping every intermediate; `alpha_override` substitutes
    /// a fixed gate in place of the computed one (a test hook for checking
    /// the residual identities at alpha = 0 and alpha = 1).
    pub fn forward_detailed(
        &mut self,
        x: &Array4<F>,
        train: bool,
        alpha_override: Option<&Array4<F>>,
    ) -> FauActivations<F> {
        let f = self.feature.forward(x, train);
        let skip = self.skip(x, train);
        let (att_logits, alpha) = match &mut self.attention {
            Some(branch) => {
                let (logits, alpha) = branch.forward(&f, train);
                (Some(logits), Some(alpha))
            }
            None => (None, None),
        };
        let effective = alpha_override.or(alpha.as_ref());
        let x_out = match effective {
            Some(a) => {
                let gated = &f * a;
                skip + gated
            }
            None => skip + &f,
        };
        self.last_alpha = alpha.clone();
        self.cache = train.then(|| FauCache {
            f: f.clone(),
            alpha: alpha.clone(),
        });
        FauActivations {
            x_prev: x.clone(),
            f,
            att_logits,
            alpha,
            x_out,
        }
    }
}

impl<F: Scalar> Layer<F> for Fau<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let f = self.feature.forward(x, train);
        let skip = self.skip(x, train);
        let alpha = self
            .attention
            .as_mut()
            .map(|branch| branch.forward(&f, train).1);
        let x_out = match &alpha {
            Some(a) => skip + &f * a,
            None => skip + &f,
        };
        self.last_alpha = alpha.clone();
        self.cache = if train { Some(FauCache { f, alpha }) } else { None };
        x_out
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("unit backward before forward");
        let grad_f = match &cache.alpha {
            Some(alpha) => {
                // y = skip + alpha * f with alpha = A(f): the gradient into f
                // is grad * alpha plus the attention branch's contribution
                // from grad_alpha = sum over channels of grad * f.
                let grad_alpha = (grad_out * &cache.f)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                let branch = self.attention.as_mut().expect("alpha implies attention");
                let from_att = branch.backward(&grad_alpha);
                grad_out * alpha + from_att
            }
            None => grad_out.clone(),
        };
        let grad_from_feature = self.feature.backward(&grad_f);
        let grad_from_skip = match &mut self.scale {
            Some(s) => s.backward(grad_out),
            None => grad_out.clone(),
        };
        grad_from_feature + grad_from_skip
    }

    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        self.feature.visit_params(&join(prefix, "feat"), f);
        if let Some(s) = &mut self.scale {
            s.visit_params(&join(prefix, "scale"), f);
        }
        if let Some(branch) = &mut self.attention {
            branch.visit_params(&join(prefix, "att"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: StateVisitor<F>) {
        self.feature.visit_state(&join(prefix, "feat"), f);
        if let Some(s) = &mut self.scale {
            s.visit_state(&join(prefix, "scale"), f);
        }
        if let Some(branch) = &mut self.attention {
            branch.visit_state(&join(prefix, "att"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count_params, finite_difference_check, ParamTree};
    use crate::seed::derive_rng;
    use approx::assert_abs_diff_eq;

    fn toy_input(c: usize, side: usize) -> Array4<f64> {
        Array4::from_shape_fn((2, c, side, side), |(a, b, y, z)| {
            ((a * 29 + b * 13 + y * 7 + z * 3) % 23) as f64 / 23.0 - 0.45
        })
    }

    #[test]
    fn alpha_zero_makes_plain_unit_an_identity() {
        let mut rng = derive_rng(5, &[20]);
        let mut fau: Fau<f64> = Fau::new(FauMode::Plain, 4, 6, 8, 4, true, &mut rng);
        let x = toy_input(4, 8);
        let zeros = Array4::zeros((2, 1, 8, 8));
        let acts = fau.forward_detailed(&x, false, Some(&zeros));
        assert_eq!(acts.x_out, x, "gate forced to zero must pass input through unchanged");
    }

    #[test]
    fn alpha_one_makes_plain_unit_a_plain_residual() {
        let mut rng = derive_rng(5, &[21]);
        let mut fau: Fau<f64> = Fau::new(FauMode::Plain, 4, 6, 8, 4, true, &mut rng);
        let x = toy_input(4, 8);
        let ones = Array4::from_elem((2, 1, 8, 8), 1.0);
        let acts = fau.forward_detailed(&x, false, Some(&ones));
        let expect = &x + &acts.f;
        for (a, b) in acts.x_out.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn alpha_lies_strictly_inside_unit_interval() {
        let mut rng = derive_rng(6, &[22]);
        let mut fau: Fau<f64> = Fau::new(FauMode::Plain, 4, 6, 8, 4, true, &mut rng);
        let acts = fau.forward_detailed(&toy_input(4, 8), false, None);
        let alpha = acts.alpha.expect("attention enabled");
        assert_eq!(alpha.dim(), (2, 1, 8, 8));
        for &a in alpha.iter() {
            assert!(a > 0.0 && a < 1.0, "alpha {a} outside (0,1)");
        }
    }

    #[test]
    fn down_and_up_units_change_resolution() {
        let mut rng = derive_rng(7, &[23]);
        let mut down: Fau<f64> = Fau::new(FauMode::Down, 4, 6, 8, 4, true, &mut rng);
        let y = down.forward(&toy_input(4, 16), false);
        assert_eq!(y.dim(), (2, 4, 8, 8));
        let alpha = down.last_alpha.as_ref().unwrap();
        assert_eq!(alpha.dim(), (2, 1, 8, 8), "gate sits at the output resolution");

        let mut up: Fau<f64> = Fau::new(FauMode::Up, 4, 6, 16, 4, true, &mut rng);
        let y = up.forward(&toy_input(4, 8), false);
        assert_eq!(y.dim(), (2, 4, 16, 16));
    }

    #[test]
    fn attention_branch_reaches_requested_bottleneck() {
        let mut rng = derive_rng(8, &[24]);
        for (side, m, want_depth) in [(16usize, 4usize, 2usize), (64, 4, 4), (16, 16, 0), (32, 8, 2)]
        {
            let branch: AttentionBranch<f64> =
                AttentionBranch::new(4, 6, side, m, &mut rng);
            assert_eq!(branch.depth(), want_depth);
            assert_eq!(branch.bottleneck_side(), m);
        }
    }

    #[test]
    fn disabled_attention_is_a_bare_residual() {
        let mut rng = derive_rng(9, &[25]);
        let mut fau: Fau<f64> = Fau::new(FauMode::Plain, 4, 6, 8, 4, false, &mut rng);
        let x = toy_input(4, 8);
        let acts = fau.forward_detailed(&x, true, None);
        assert!(acts.alpha.is_none());
        assert!(acts.att_logits.is_none());
        let expect = &x + &acts.f;
        assert_eq!(acts.x_out, expect);
    }

    struct FauWrap {
        fau: Fau<f64>,
        x: Array4<f64>,
        weights: Array4<f64>,
    }
    impl ParamTree<f64> for FauWrap {
        fn visit_params(&mut self, prefix: &str, f: crate::nn::ParamVisitor<f64>) {
            self.fau.visit_params(prefix, f);
        }
    }
    impl FauWrap {
        fn loss(&mut self) -> f64 {
            // Fresh BN running stats per probe keep the loss a pure function
            // of the parameters (the probe itself runs in train mode so the
            // normalizer statistics match the analytic backward pass).
            let mut saved = Vec::new();
            self.fau.visit_state("", &mut |_, st| saved.push(st.clone()));
            let y = self.fau.forward(&self.x.clone(), true);
            let mut i = 0;
            self.fau.visit_state("", &mut |_, st| {
                st.assign(&saved[i]);
                i += 1;
            });
            (&y * &self.weights).sum()
        }
    }

    /// Every parameter of a small unit — both branches, gate included —
    /// agrees with central finite differences.
    #[test]
    fn unit_gradients_match_finite_differences() {
        let mut rng = derive_rng(10, &[26]);
        let fau: Fau<f64> = Fau::new(FauMode::Plain, 4, 6, 8, 4, true, &mut rng);
        let x = toy_input(4, 8);
        let weights = Array4::from_shape_fn((2, 4, 8, 8), |(a, b, y, z)| {
            ((a + 3 * b + 5 * y + 7 * z) % 11) as f64 / 11.0 - 0.5
        });
        let mut wrap = FauWrap { fau, x, weights };

        let y = wrap.fau.forward(&wrap.x.clone(), true);
        wrap.fau.backward(&wrap.weights.clone());
        assert_eq!(y.dim(), (2, 4, 8, 8));

        let n = count_params(&mut wrap);
        assert!(n > 0);
        // Floor 1e-6 keeps exact-zero gradients (conv biases swallowed by the
        // following batch norm) from registering as mismatches against
        // finite-difference cancellation noise; the small step keeps probes
        // from crossing rectifier kinks.
        let report = finite_difference_check(&mut wrap, |w| w.loss(), 1e-5, 1e-6, 7);
        assert!(
            report.max_rel_error < 1e-4,
            "unit gradient mismatch ({} probes): {}",
            report.checked,
            report.worst
        );
    }

    #[test]
    fn unit_input_gradient_matches_finite_differences() {
        let mut rng = derive_rng(11, &[27]);
        let mut fau: Fau<f64> = Fau::new(FauMode::Down, 4, 6, 4, 4, true, &mut rng);
        let x = toy_input(4, 8);
        let weights = Array4::from_shape_fn((2, 4, 4, 4), |(a, b, y, z)| {
            ((2 * a + b + 3 * y + 5 * z) % 9) as f64 / 9.0 - 0.4
        });
        fau.forward(&x, true);
        let gin = fau.backward(&weights);

        let eps = 1e-6;
        let mut saved = Vec::new();
        fau.visit_state("", &mut |_, st| saved.push(st.clone()));
        let eval = |xq: &Array4<f64>, fau: &mut Fau<f64>| {
            let y = fau.forward(xq, true);
            let mut i = 0;
            fau.visit_state("", &mut |_, st| {
                st.assign(&saved[i]);
                i += 1;
            });
            (&y * &weights).sum()
        };
        for probe in [(0usize, 0usize, 0usize, 0usize), (1, 3, 7, 7), (0, 2, 4, 5)] {
            let mut xp = x.clone();
            xp[probe] += eps;
            let mut xm = x.clone();
            xm[probe] -= eps;
            let numeric = (eval(&xp, &mut fau) - eval(&xm, &mut fau)) / (2.0 * eps);
            assert_abs_diff_eq!(gin[probe], numeric, epsilon = 1e-5);
        }
    }

    #[test]
    fn parameter_visit_paths_are_unique() {
        let mut rng = derive_rng(12, &[28]);
        let mut fau: Fau<f64> = Fau::new(FauMode::Up, 4, 6, 16, 4, true, &mut rng);
        let mut paths = Vec::new();
        fau.visit_params("u", &mut |p, _| paths.push(p.to_string()));
        let mut sorted = paths.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), paths.len(), "duplicate parameter paths");
        assert!(paths.iter().all(|p| p.starts_with("u.")));
    }
}
