//! Face super-resolution generators built from face attention units, plus
//! the multi-scale discriminator stack and checkpoint plumbing.

mod checkpoint;
mod discriminator;
mod fau;
mod generator;

pub use checkpoint::{
    container_fingerprint, load_generator, read_container, save_generator, write_container,
    CheckpointContainer, OptimizerState, CHECKPOINT_VERSION,
};
pub use discriminator::{Discriminator, DiscriminatorStack};
pub use fau::{AttentionBranch, Fau, FauActivations, FauMode, Hourglass};
pub use generator::Generator;

use serde::{Deserialize, Serialize};

use crate::seed::fnv1a64;
use crate::{Error, Result};

/// Which generator family a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sparnet,
    Sparnethd,
}

/// Width of the attention hourglass in the reference models.
pub const HOURGLASS_CHANNELS: usize = 64;

/// Structural description of a generator.
///
/// The unit sequence is `n_down` halving units, `n_feat` resolution-keeping
/// units, then `n_up` doubling units. `attention_count` units counted from
/// the output end carry a spatial-attention branch; the rest use the bare
/// residual form. Every attention branch downsamples until its feature side
/// reaches `bottleneck_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Feature-branch width (64 for the base model, 128 for the HD model).
    pub base_channels: usize,
    pub n_down: usize,
    pub n_feat: usize,
    pub n_up: usize,
    /// How many units, counted from the output end, get attention branches.
    pub attention_count: usize,
    /// Side length of the attention bottleneck (one of 2, 4, 8, 16).
    pub bottleneck_size: usize,
    /// Input/output side length; the network consumes pre-upsampled images.
    pub hr_side: usize,
    /// Attention-branch width; the reference models use 64.
    #[serde(default = "default_att_channels")]
    pub att_channels: usize,
}

fn default_att_channels() -> usize {
    HOURGLASS_CHANNELS
}

impl ModelConfig {
    /// The published base model: 16 units at width 64 on 128x128 images,
    /// all attention branches enabled, 4x4 bottleneck.
    pub fn sparnet() -> Self {
        Self {
            variant: Variant::Sparnet,
            base_channels: 64,
            n_down: 3,
            n_feat: 10,
            n_up: 3,
            attention_count: 16,
            bottleneck_size: 4,
            hr_side: 128,
            att_channels: HOURGLASS_CHANNELS,
        }
    }

    /// The high-resolution model: width 128 on 512x512 images; attention
    /// branches keep width 64 behind 1x1 adapters.
    pub fn sparnethd() -> Self {
        Self {
            variant: Variant::Sparnethd,
            base_channels: 128,
            hr_side: 512,
            ..Self::sparnet()
        }
    }

    pub fn total_units(&self) -> usize {
        self.n_down + self.n_feat + self.n_up
    }

    /// Whether unit `j` (forward order, zero-based) has an attention branch.
    pub fn attention_enabled(&self, j: usize) -> bool {
        j + self.attention_count >= self.total_units()
    }

    /// Mode and output side of every unit in forward order.
    pub fn unit_layout(&self) -> Vec<(FauMode, usize)> {
        let mut side = self.hr_side;
        let mut layout = Vec::with_capacity(self.total_units());
        for _ in 0..self.n_down {
            side /= 2;
            layout.push((FauMode::Down, side));
        }
        for _ in 0..self.n_feat {
            layout.push((FauMode::Plain, side));
        }
        for _ in 0..self.n_up {
            side *= 2;
            layout.push((FauMode::Up, side));
        }
        layout
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.base_channels == 0 || self.att_channels == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.total_units() == 0 {
            return fail("model needs at least one unit".into());
        }
        if self.attention_count > self.total_units() {
            return fail(format!(
                "attention_count {} exceeds the {} units",
                self.attention_count,
                self.total_units()
            ));
        }
        if !matches!(self.bottleneck_size, 2 | 4 | 8 | 16) {
            return fail(format!(
                "bottleneck_size must be 2, 4, 8 or 16, got {}",
                self.bottleneck_size
            ));
        }
        if self.n_down != self.n_up {
            return fail(format!(
                "n_down ({}) and n_up ({}) must match so output size equals input size",
                self.n_down, self.n_up
            ));
        }
        if self.hr_side == 0 || self.hr_side % (1 << self.n_down) != 0 {
            return fail(format!(
                "hr_side {} is not divisible by 2^{}",
                self.hr_side, self.n_down
            ));
        }
        for (j, (_, side)) in self.unit_layout().iter().enumerate() {
            if self.attention_enabled(j) && !halves_down_to(*side, self.bottleneck_size) {
                return fail(format!(
                    "unit {j} feature side {side} cannot reach the {}x{} bottleneck by halving",
                    self.bottleneck_size, self.bottleneck_size
                ));
            }
        }
        Ok(())
    }

    /// Stable digest of the structural fields, stored in checkpoints so a
    /// weight file cannot be loaded into a differently shaped model.
    pub fn fingerprint(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("config serializes");
        fnv1a64(canonical.as_bytes())
    }
}

/// True when `side` can be repeatedly halved to land exactly on `target`.
fn halves_down_to(mut side: usize, target: usize) -> bool {
    while side > target && side % 2 == 0 {
        side /= 2;
    }
    side == target
}

/// Number of trainable scalars in the generator a config describes.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    let mut model: Generator<f32> = Generator::new(cfg, 0)?;
    Ok(crate::nn::count_params(&mut model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_is_valid() {
        ModelConfig::sparnet().validate().unwrap();
        ModelConfig::sparnethd().validate().unwrap();
    }

    #[test]
    fn reference_layout_has_sixteen_units() {
        let cfg = ModelConfig::sparnet();
        let layout = cfg.unit_layout();
        assert_eq!(layout.len(), 16);
        let sides: Vec<usize> = layout.iter().map(|(_, s)| *s).collect();
        assert_eq!(
            sides,
            [64, 32, 16, 16, 16, 16, 16, 16, 16, 16, 16, 16, 16, 32, 64, 128]
        );
        assert!(matches!(layout[0].0, FauMode::Down));
        assert!(matches!(layout[5].0, FauMode::Plain));
        assert!(matches!(layout[15].0, FauMode::Up));
    }

    #[test]
    fn attention_enables_from_the_output_end() {
        let mut cfg = ModelConfig::sparnet();
        cfg.attention_count = 3;
        let enabled: Vec<bool> = (0..16).map(|j| cfg.attention_enabled(j)).collect();
        assert_eq!(enabled.iter().filter(|e| **e).count(), 3);
        assert!(enabled[13] && enabled[14] && enabled[15]);
        assert!(!enabled[12]);
    }

    #[test]
    fn rejects_impossible_bottleneck() {
        let mut cfg = ModelConfig::sparnet();
        cfg.bottleneck_size = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::sparnet();
        cfg.hr_side = 8; // smallest feature side 1, cannot reach 4x4
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_mismatched_down_up() {
        let mut cfg = ModelConfig::sparnet();
        cfg.n_up = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn all_published_bottleneck_sizes_fit_the_reference_sides() {
        for m in [2usize, 4, 8, 16] {
            let mut cfg = ModelConfig::sparnet();
            cfg.bottleneck_size = m;
            cfg.validate().unwrap_or_else(|e| panic!("bottleneck {m}: {e}"));
        }
    }

    #[test]
    fn fingerprint_tracks_structural_changes() {
        let a = ModelConfig::sparnet();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.n_feat = 9;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ModelConfig::sparnethd();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn reference_parameter_count_sits_near_the_published_size() {
        let n = count_parameters(&ModelConfig::sparnet()).unwrap() as f64;
        let anchor = 9.86e6;
        assert!(
            n >= anchor * 0.85 && n <= anchor * 1.15,
            "reference model has {n} parameters, outside [{}, {}]",
            anchor * 0.85,
            anchor * 1.15
        );
    }

    #[test]
    fn single_plain_unit_matches_hand_summed_count() {
        use crate::nn::{count_params, Layer, ParamTree, ParamVisitor};
        use crate::seed::derive_rng;

        struct W(Fau<f32>);
        impl ParamTree<f32> for W {
            fn visit_params(&mut self, prefix: &str, f: ParamVisitor<f32>) {
                self.0.visit_params(prefix, f);
            }
        }

        let mut rng = derive_rng(0, &[50]);
        // Plain unit at width 64 on a 16x16 map with a 4x4 bottleneck.
        let fau: Fau<f32> = Fau::new(FauMode::Plain, 64, 64, 16, 4, true, &mut rng);
        let got = count_params(&mut W(fau));

        // Hand-summed: a 3x3 conv at width 64 has 64*64*9 weights + 64
        // biases; each batch norm holds gamma and beta; each PReLU one slope.
        let conv = 64 * 64 * 9 + 64;
        let bn = 64 + 64;
        let prelu = 1;
        let block = conv + bn + prelu; // conv -> BN -> PReLU unit of the hourglass
        let feature = 2 * (bn + prelu + conv); // [BN -> PReLU -> conv] x2
        // Hourglass to a 4x4 bottleneck from 16x16: two levels of
        // (1 skip + 2 down + 2 up) blocks, plus a 2-block bottleneck.
        let hourglass = 2 * 5 * block + 2 * block;
        let score = 64 * 9 + 1; // 3x3 conv to one channel
        let want = feature + hourglass + score;
        assert_eq!(got, want);
    }
}
