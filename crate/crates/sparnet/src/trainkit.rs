//! Training loops, experiment configuration, and inference entry points.
//!
//! The base model minimizes pixel L2 with Adam(2e-4, 0.9, 0.99). The HD
//! model alternates one generator step on the weighted four-term loss with
//! one discriminator step on the hinge loss, using Adam(1e-4, 0.5, 0.99)
//! for G and Adam(4e-4, 0.5, 0.99) for D. Every random draw is keyed by
//! `(seed, iteration)` so runs are reproducible and checkpoint resume
//! continues the exact same stream.

use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_augment, degrade, sample_augment, sample_params, SampleSeed};
use crate::imaging::{read_image, resize, ImageTensor, ResizeMode};
use crate::losses::{
    feature_matching_grad, hinge_g_grad, pixel_l1_grad, pixel_l2_grad, total_g_loss, GLossTerms,
    LossWeights, PerceptualExtractor,
};
use crate::metrics::psnr;
use crate::model::{
    load_generator, read_container, save_generator, write_container, CheckpointContainer,
    DiscriminatorStack, Generator, ModelConfig, Variant,
};
use crate::nn::{zero_grads, Adam, AvgPool2, Layer, ParamTree};
use crate::seed::{derive_rng, STREAM_BATCH};
use crate::{Error, Result};

/// Adaptive-moment optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        // lr == 0 is allowed: it freezes the target, which tests rely on.
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("betas must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Full training schedule. `optimizer` drives the generator; `d_optimizer`
/// and `d_base_channels` only matter for the adversarial variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    /// Side of the synthetic low-resolution input before bicubic
    /// pre-upsampling (the base pipeline; evaluation uses it too).
    pub lr_side: usize,
    pub optimizer: OptimizerSettings,
    pub d_optimizer: OptimizerSettings,
    pub d_base_channels: usize,
    pub max_iters: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub eval_every: u64,
    /// Images from the head of the dataset used for periodic evaluation.
    pub eval_subset: usize,
    /// Optional global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Published schedule for the base model: batch 64, Adam(2e-4, 0.9, 0.99).
    pub fn sparnet() -> Self {
        Self {
            variant: Variant::Sparnet,
            batch_size: 64,
            lr_side: 16,
            optimizer: OptimizerSettings {
                lr: 2e-4,
                beta1: 0.9,
                beta2: 0.99,
            },
            d_optimizer: OptimizerSettings {
                lr: 4e-4,
                beta1: 0.5,
                beta2: 0.99,
            },
            d_base_channels: 64,
            max_iters: 100_000,
            checkpoint_every: 5_000,
            log_every: 10,
            eval_every: 500,
            eval_subset: 32,
            grad_clip: None,
            seed: 0,
        }
    }

    /// Published schedule for the adversarial variant: batch 2,
    /// G Adam(1e-4, 0.5, 0.99), D Adam(4e-4, 0.5, 0.99).
    pub fn sparnethd() -> Self {
        Self {
            variant: Variant::Sparnethd,
            batch_size: 2,
            lr_side: 128,
            optimizer: OptimizerSettings {
                lr: 1e-4,
                beta1: 0.5,
                beta2: 0.99,
            },
            ..Self::sparnet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.d_optimizer.validate()?;
        let positives = [
            ("batch_size", self.batch_size as u64),
            ("lr_side", self.lr_side as u64),
            ("d_base_channels", self.d_base_channels as u64),
            ("max_iters", self.max_iters),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
            ("eval_every", self.eval_every),
            ("eval_subset", self.eval_subset as u64),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::sparnet()
    }
}

/// Input and output locations for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub hr_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
}

/// Everything one training run needs, serializable as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub losses: LossWeights,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.losses.validate()?;
        if self.train.lr_side > self.model.hr_side {
            return Err(Error::Config(format!(
                "lr_side {} exceeds the model side {}",
                self.train.lr_side, self.model.hr_side
            )));
        }
        Ok(())
    }
}

/// Parse and validate an experiment config from a TOML file.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write an experiment config as TOML.
pub fn save_experiment(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config encode: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    /// Weighted generator loss (plain pixel L2 for the base model).
    pub g_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_psnr_db: Option<f64>,
}

/// Write a metric log as line-delimited JSON.
pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(
            &serde_json::to_string(rec).map_err(|e| Error::Config(format!("log encode: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a metric log written by [`write_log`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("log line: {e}"))))
        .collect()
}

/// In-memory corpus of square HR images at the model resolution.
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    /// Load every PNG/JPEG in `dir` (sorted by name), resizing to
    /// `hr_side` where needed.
    pub fn from_dir(dir: &Path, hr_side: usize) -> Result<Self> {
        let names = crate::metrics::image_names(dir)?;
        if names.is_empty() {
            return Err(Error::Config(format!("no images found in {}", dir.display())));
        }
        let mut images = Vec::with_capacity(names.len());
        for name in &names {
            let img = read_image(&dir.join(name))?;
            let img = if img.height() == hr_side && img.width() == hr_side {
                img
            } else {
                resize(&img, hr_side, hr_side, ResizeMode::Bicubic)?.clamped()
            };
            images.push(img);
        }
        Ok(Self { names, images })
    }

    /// Build a corpus directly from tensors (tests, synthetic data).
    pub fn from_images(names: Vec<String>, images: Vec<ImageTensor>) -> Self {
        assert_eq!(names.len(), images.len());
        Self { names, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Outputs of a base-model training run.
pub struct TrainArtifacts {
    pub generator: Generator<f32>,
    pub log: Vec<LogRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Outputs of an adversarial training run.
pub struct HdArtifacts {
    pub generator: Generator<f32>,
    pub discriminator: DiscriminatorStack<f32>,
    pub log: Vec<LogRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub final_d_checkpoint: Option<PathBuf>,
}

/// Flags a collapsed discriminator: its loss sits below `threshold` while
/// the generator loss rises, for `patience` consecutive observations.
pub struct CollapseDetector {
    threshold: f64,
    patience: u32,
    streak: u32,
    prev_g: Option<f64>,
}

impl CollapseDetector {
    pub fn new(threshold: f64, patience: u32) -> Self {
        Self {
            threshold,
            patience,
            streak: 0,
            prev_g: None,
        }
    }

    /// The production setting: D under 1e-3 for 500 iterations while G
    /// grows monotonically.
    pub fn standard() -> Self {
        Self::new(1e-3, 500)
    }

    /// Feed one iteration's losses; returns true once divergence is
    /// established.
    pub fn observe(&mut self, g_loss: f64, d_loss: f64) -> bool {
        let growing = self.prev_g.map_or(false, |p| g_loss > p);
        if d_loss < self.threshold && growing {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.prev_g = Some(g_loss);
        self.streak >= self.patience
    }
}

fn stack_batch(items: &[ImageTensor]) -> Array4<f32> {
    let (c, h, w) = items[0].data().dim();
    let mut out = Array4::zeros((items.len(), c, h, w));
    for (i, img) in items.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(img.data());
    }
    out
}

fn image_from_batch(batch: &Array4<f32>, index: usize) -> ImageTensor {
    ImageTensor::new(batch.slice(s![index, .., .., ..]).to_owned())
        .expect("network output is finite")
        .clamped()
}

/// Draw batch indices for one iteration.
fn batch_indices(seed: u64, iter: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &[STREAM_BATCH, iter]);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Base-model batch: augmented HR target and its bicubic down-up input.
fn sparnet_batch(
    dataset: &Dataset,
    cfg: &TrainConfig,
    hr_side: usize,
    iter: u64,
) -> Result<(Array4<f32>, Array4<f32>, Vec<usize>)> {
    let idxs = batch_indices(cfg.seed, iter, cfg.batch_size, dataset.len());
    let mut xs = Vec::with_capacity(idxs.len());
    let mut ys = Vec::with_capacity(idxs.len());
    for (slot, &i) in idxs.iter().enumerate() {
        let sample = SampleSeed {
            global_seed: cfg.seed,
            sample_index: iter * cfg.batch_size as u64 + slot as u64,
        };
        let hr = apply_augment(&dataset.images[i], &sample_augment(sample))?.clamped();
        let lr = resize(&hr, cfg.lr_side, cfg.lr_side, ResizeMode::Bicubic)?.clamped();
        let lr_up = resize(&lr, hr_side, hr_side, ResizeMode::Bicubic)?.clamped();
        xs.push(lr_up);
        ys.push(hr);
    }
    Ok((stack_batch(&xs), stack_batch(&ys), idxs))
}

/// Adversarial batch: augmented HR target and its degraded-then-upscaled
/// input, synthesized on the fly.
fn hd_batch(
    dataset: &Dataset,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<(Array4<f32>, Array4<f32>, Vec<usize>)> {
    let idxs = batch_indices(cfg.seed, iter, cfg.batch_size, dataset.len());
    let mut xs = Vec::with_capacity(idxs.len());
    let mut ys = Vec::with_capacity(idxs.len());
    for (slot, &i) in idxs.iter().enumerate() {
        let sample = SampleSeed {
            global_seed: cfg.seed,
            sample_index: iter * cfg.batch_size as u64 + slot as u64,
        };
        let hr = apply_augment(&dataset.images[i], &sample_augment(sample))?.clamped();
        let params = sample_params(sample);
        let (_, lr_up) = degrade(&hr, &params, sample)?;
        xs.push(lr_up);
        ys.push(hr);
    }
    Ok((stack_batch(&xs), stack_batch(&ys), idxs))
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
fn clip_gradients(tree: &mut dyn ParamTree<f32>, max_norm: f64) {
    let mut sq = 0.0f64;
    tree.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = (max_norm / norm) as f32;
        tree.visit_params("", &mut |_, p| {
            p.grad.mapv_inplace(|g| g * factor);
        });
    }
}

/// Mean PSNR of the model against the first `eval_subset` dataset images,
/// degrading with the plain bicubic down-up path.
fn eval_psnr(
    gen: &mut Generator<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let side = gen.config().hr_side;
    let count = cfg.eval_subset.min(dataset.len());
    let mut total = 0.0f64;
    for img in dataset.images.iter().take(count) {
        let lr = resize(img, cfg.lr_side, cfg.lr_side, ResizeMode::Bicubic)?.clamped();
        let lr_up = resize(&lr, side, side, ResizeMode::Bicubic)?.clamped();
        let x = stack_batch(std::slice::from_ref(&lr_up));
        let sr = gen.forward(&x, false)?;
        total += psnr(&image_from_batch(&sr, 0), img)?;
    }
    let mean = total / count as f64;
    Ok(mean.is_finite().then_some(mean))
}

fn checkpoint_path(out_dir: &Path, iter: u64, suffix: &str) -> PathBuf {
    out_dir.join(format!("ckpt_{iter:07}{suffix}.spck"))
}

/// Train the base model with pixel L2 only. `resume` continues from a
/// checkpoint written by an earlier run with the same configs.
pub fn train_sparnet(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<TrainArtifacts> {
    model_cfg.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let opt_cfg = &cfg.optimizer;
    let mut opt = Adam::new(opt_cfg.lr, opt_cfg.beta1, opt_cfg.beta2);
    let (mut gen, start_iter) = match resume {
        Some(path) => {
            let (gen, container) = load_generator(path, Some(model_cfg))?;
            container.restore_optimizer(&mut opt)?;
            (gen, opt.t)
        }
        None => (Generator::new(model_cfg, cfg.seed)?, 0),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hr_side = model_cfg.hr_side;
    let mut log = Vec::new();
    for iter in start_iter..cfg.max_iters {
        let (x, y, idxs) = sparnet_batch(dataset, cfg, hr_side, iter)?;
        let sr = gen.forward(&x, true)?;
        let (loss, grad) = pixel_l2_grad(&sr, &y);
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite pixel loss at iteration {iter} (batch indices {idxs:?})"
            )));
        }
        zero_grads(&mut gen);
        gen.backward(&grad);
        if let Some(c) = cfg.grad_clip {
            clip_gradients(&mut gen, c);
        }
        opt.step(&mut gen);

        let done = iter + 1;
        if done % cfg.log_every == 0 || done == cfg.max_iters {
            let eval = if done % cfg.eval_every == 0 || done == cfg.max_iters {
                eval_psnr(&mut gen, dataset, cfg)?
            } else {
                None
            };
            log.push(LogRecord {
                iter: done,
                g_loss: loss,
                d_loss: None,
                eval_psnr_db: eval,
            });
        }
        if let Some(dir) = out_dir {
            if done % cfg.checkpoint_every == 0 && done != cfg.max_iters {
                save_generator(&checkpoint_path(dir, done, ""), &mut gen, Some(&opt))?;
            }
        }
    }
    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("final.spck");
            save_generator(&path, &mut gen, Some(&opt))?;
            write_log(&dir.join("train_log.jsonl"), &log)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainArtifacts {
        generator: gen,
        log,
        final_checkpoint,
    })
}

fn discriminator_config_json(hr_side: usize, base: usize) -> serde_json::Value {
    serde_json::json!({ "hr_side": hr_side, "base_channels": base })
}

fn save_discriminator(
    path: &Path,
    disc: &mut DiscriminatorStack<f32>,
    opt: Option<&Adam<f32>>,
) -> Result<()> {
    let config = discriminator_config_json(disc.hr_side(), disc.base_channels());
    let container = CheckpointContainer::from_tree("discriminator", config, disc, opt);
    write_container(path, &container)
}

fn load_discriminator(
    path: &Path,
    hr_side: usize,
    base: usize,
) -> Result<(DiscriminatorStack<f32>, CheckpointContainer)> {
    let container = read_container(path)?;
    if container.role != "discriminator" {
        return Err(Error::Checkpoint(format!(
            "expected a discriminator checkpoint, found role {:?}",
            container.role
        )));
    }
    let want = discriminator_config_json(hr_side, base);
    if container.config_json != want {
        return Err(Error::Checkpoint(format!(
            "discriminator config mismatch: checkpoint {}, requested {want}",
            container.config_json
        )));
    }
    let mut disc = DiscriminatorStack::with_base(hr_side, base, 0)?;
    container.apply_to(&mut disc)?;
    Ok((disc, container))
}

/// Half-resolution pyramid for the three discriminator scales (2x average
/// pooling equals bilinear downsampling at half-pixel centers).
fn pyramid(x: &Array4<f32>) -> [Array4<f32>; 3] {
    let x1 = AvgPool2.forward(x, false);
    let x2 = AvgPool2.forward(&x1, false);
    [x.clone(), x1, x2]
}

fn pyramid_backward(grads: [Array4<f32>; 3]) -> Array4<f32> {
    let [g0, g1, g2] = grads;
    let d1 = g1 + AvgPool2.backward(&g2);
    g0 + AvgPool2.backward(&d1)
}

/// Train the adversarial variant. The perceptual extractor is required
/// whenever its loss weight is nonzero; it is never updated.
#[allow(clippy::too_many_arguments)]
pub fn train_sparnethd(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut extractor: Option<&mut PerceptualExtractor<f32>>,
    resume_g: Option<&Path>,
    resume_d: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<HdArtifacts> {
    model_cfg.validate()?;
    cfg.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if weights.perceptual > 0.0 && extractor.is_none() {
        return Err(Error::Config(
            "perceptual weight is nonzero but no extractor was supplied".into(),
        ));
    }
    let g_cfg = &cfg.optimizer;
    let d_cfg = &cfg.d_optimizer;
    let mut opt_g = Adam::new(g_cfg.lr, g_cfg.beta1, g_cfg.beta2);
    let mut opt_d = Adam::new(d_cfg.lr, d_cfg.beta1, d_cfg.beta2);
    let (mut gen, start_iter) = match resume_g {
        Some(path) => {
            let (gen, container) = load_generator(path, Some(model_cfg))?;
            container.restore_optimizer(&mut opt_g)?;
            (gen, opt_g.t)
        }
        None => (Generator::new(model_cfg, cfg.seed)?, 0),
    };
    let mut disc = match resume_d {
        Some(path) => {
            let (disc, container) =
                load_discriminator(path, model_cfg.hr_side, cfg.d_base_channels)?;
            container.restore_optimizer(&mut opt_d)?;
            disc
        }
        None => DiscriminatorStack::with_base(model_cfg.hr_side, cfg.d_base_channels, cfg.seed)?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n_scales = disc.scales.len();
    let batch_f = cfg.batch_size as f64;
    let use_gan_grads = weights.adversarial > 0.0 || weights.feature_matching > 0.0;
    let mut detector = CollapseDetector::standard();
    let mut log = Vec::new();
    for iter in start_iter..cfg.max_iters {
        let (x, y, idxs) = hd_batch(dataset, cfg, iter)?;

        // Generator step on the weighted four-term objective.
        let sr = gen.forward(&x, true)?;
        let sr_pyr = pyramid(&sr);
        let hr_pyr = pyramid(&y);
        let (pix_loss, pix_grad) = pixel_l1_grad(&sr, &y);
        let mut terms = GLossTerms {
            pixel: pix_loss as f64,
            adversarial: 0.0,
            feature_matching: 0.0,
            perceptual: 0.0,
        };
        let mut total_grad = pix_grad.mapv(|v| v * weights.pixel as f32);
        if use_gan_grads {
            let mut fake_scores = Vec::with_capacity(n_scales);
            let mut fake_taps = Vec::with_capacity(n_scales);
            let mut real_taps = Vec::with_capacity(n_scales);
            for (k, d) in disc.scales.iter_mut().enumerate() {
                real_taps.push(d.forward(&hr_pyr[k], false)?.1);
                let (scores, taps) = d.forward(&sr_pyr[k], true)?;
                fake_scores.push(scores);
                fake_taps.push(taps);
            }
            let (adv_loss, adv_grads) = hinge_g_grad(&fake_scores);
            let (fm_loss, fm_grads) = feature_matching_grad(&fake_taps, &real_taps);
            terms.adversarial = adv_loss as f64;
            terms.feature_matching = fm_loss as f64;
            let mut scale_grads = Vec::with_capacity(n_scales);
            for (k, d) in disc.scales.iter_mut().enumerate() {
                let gs = adv_grads[k].mapv(|v| v * weights.adversarial as f32);
                let tg: Vec<Array4<f32>> = fm_grads[k]
                    .iter()
                    .map(|g| g.mapv(|v| v * weights.feature_matching as f32))
                    .collect();
                scale_grads.push(d.backward(&gs, Some(&tg)));
            }
            let [g0, g1, g2] = [
                scale_grads.remove(0),
                scale_grads.remove(0),
                scale_grads.remove(0),
            ];
            total_grad += &pyramid_backward([g0, g1, g2]);
        }
        if weights.perceptual > 0.0 {
            let ext = extractor.as_deref_mut().expect("checked above");
            let (pcp_loss, pcp_grad) = crate::losses::perceptual_grad(&sr, &y, ext);
            terms.perceptual = pcp_loss as f64;
            total_grad += &pcp_grad.mapv(|v| v * weights.perceptual as f32);
        }
        let g_loss = total_g_loss(&terms, weights);
        if !g_loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite generator loss at iteration {iter} (batch indices {idxs:?})"
            )));
        }
        zero_grads(&mut gen);
        gen.backward(&total_grad);
        if let Some(c) = cfg.grad_clip {
            clip_gradients(&mut gen, c);
        }
        opt_g.step(&mut gen);

        // Discriminator step on the hinge loss; the generator output is
        // treated as a constant. Feature-matching gradients accumulated
        // above are discarded here so they never update D.
        zero_grads(&mut disc);
        let mut d_loss = 0.0f64;
        for (k, d) in disc.scales.iter_mut().enumerate() {
            let (real, _) = d.forward(&hr_pyr[k], true)?;
            let gr = real.mapv(|v| if v < 1.0 { -1.0 / batch_f as f32 } else { 0.0 });
            d.backward(&gr, None);
            let (fake, _) = d.forward(&sr_pyr[k], true)?;
            let gf = fake.mapv(|v| if v > -1.0 { 1.0 / batch_f as f32 } else { 0.0 });
            d.backward(&gf, None);
            for (&r, &f) in real.iter().zip(fake.iter()) {
                d_loss += ((1.0 - r).max(0.0) as f64 + (1.0 + f).max(0.0) as f64) / batch_f;
            }
        }
        if !d_loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite discriminator loss at iteration {iter} (batch indices {idxs:?})"
            )));
        }
        opt_d.step(&mut disc);
        if detector.observe(g_loss, d_loss) {
            return Err(Error::Train(format!(
                "discriminator collapse at iteration {iter}: loss under threshold while the \
                 generator loss grows"
            )));
        }

        let done = iter + 1;
        if done % cfg.log_every == 0 || done == cfg.max_iters {
            let eval = if done % cfg.eval_every == 0 || done == cfg.max_iters {
                eval_psnr(&mut gen, dataset, cfg)?
            } else {
                None
            };
            log.push(LogRecord {
                iter: done,
                g_loss,
                d_loss: Some(d_loss),
                eval_psnr_db: eval,
            });
        }
        if let Some(dir) = out_dir {
            if done % cfg.checkpoint_every == 0 && done != cfg.max_iters {
                save_generator(&checkpoint_path(dir, done, ""), &mut gen, Some(&opt_g))?;
                save_discriminator(&checkpoint_path(dir, done, "_d"), &mut disc, Some(&opt_d))?;
            }
        }
    }
    let (final_checkpoint, final_d_checkpoint) = match out_dir {
        Some(dir) => {
            let g_path = dir.join("final.spck");
            let d_path = dir.join("final_d.spck");
            save_generator(&g_path, &mut gen, Some(&opt_g))?;
            save_discriminator(&d_path, &mut disc, Some(&opt_d))?;
            write_log(&dir.join("train_log.jsonl"), &log)?;
            (Some(g_path), Some(d_path))
        }
        None => (None, None),
    };
    Ok(HdArtifacts {
        generator: gen,
        discriminator: disc,
        log,
        final_checkpoint,
        final_d_checkpoint,
    })
}

fn prepare_infer_input(gen: &Generator<f32>, input: &ImageTensor) -> Result<Array4<f32>> {
    if input.channels() != 3 {
        return Err(Error::Contract(format!(
            "inference needs a 3-channel image, got {}",
            input.channels()
        )));
    }
    let side = gen.config().hr_side;
    let up = if input.height() == side && input.width() == side {
        input.clone()
    } else {
        resize(input, side, side, ResizeMode::Bicubic)?.clamped()
    };
    Ok(stack_batch(std::slice::from_ref(&up)))
}

/// Super-resolve one image: bicubic pre-upsample to the model side,
/// eval-mode forward, clamp.
pub fn infer(gen: &mut Generator<f32>, input: &ImageTensor) -> Result<ImageTensor> {
    let x = prepare_infer_input(gen, input)?;
    let sr = gen.forward(&x, false)?;
    Ok(image_from_batch(&sr, 0))
}

/// Like [`infer`], also returning each enabled unit's attention map as a
/// 2-D array in `[0, 1]`.
pub fn infer_with_attention(
    gen: &mut Generator<f32>,
    input: &ImageTensor,
) -> Result<(ImageTensor, Vec<ndarray::Array2<f32>>)> {
    let x = prepare_infer_input(gen, input)?;
    let (sr, maps) = gen.forward_with_maps(&x, false)?;
    let maps = maps
        .into_iter()
        .map(|m| m.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned())
        .collect();
    Ok((image_from_batch(&sr, 0), maps))
}
