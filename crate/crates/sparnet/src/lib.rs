//! Face super-resolution with spatial-attention residual networks.
//!
//! The crate bundles everything needed to run desk-scale face SR experiments:
//!
//! - [`imaging`]: channel-major float images, color conversion, resampling, PNG/JPEG I/O
//! - [`degrade`]: the blur/downsample/noise/JPEG degradation model and training augmentations
//! - [`nn`]: a small CNN layer stack with hand-written backward passes (f32 for training,
//!   f64 for finite-difference verification)
//! - [`model`]: the spatial-attention generator, the three-scale discriminator stack,
//!   and checkpoint containers
//! - [`losses`]: pixel, hinge-adversarial, feature-matching, and perceptual objectives
//! - [`metrics`]: luminance-channel PSNR/SSIM, error maps, and corpus reports
//! - [`trainkit`]: training loops, Adam schedules, and inference
//! - [`viz`]: false-color error heatmaps, attention renderings, and PSNR curve plots
//! - [`cli`]: the `sparnet` command-line entry points and run manifests
//!
//! Everything is deterministic given a seed: dataset synthesis, weight init,
//! batch composition, and augmentation all derive their randomness from
//! [`seed::derive_rng`] so runs reproduce byte-identically.

pub mod cli;
pub mod degrade;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod trainkit;
pub mod viz;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Reading or writing a file failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An image file could not be decoded or encoded.
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model or training configuration is internally inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A checkpoint file is malformed or does not match the target model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss, divergence, bad data).
    #[error("training aborted: {0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Image {
            path: path.into(),
            message: message.into(),
        }
    }
}
