//! Synthetic low-quality image generation and training-time augmentation.
//!
//! High-resolution faces are pushed through blur → bicubic downscale →
//! additive white Gaussian noise → JPEG compression, then upscaled back to
//! the original side to form the network input. Every random choice is a
//! pure function of `(global_seed, sample_index)`, so a manifest of seeds
//! and paths regenerates a byte-identical dataset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{resize, jpeg_roundtrip, ImageTensor, ResizeMode};
use crate::seed::{derive_rng, STREAM_AUGMENT, STREAM_NOISE, STREAM_PARAMS};
use crate::{Error, Result};

/// Inclusive bounds of the downscale factor (16/512 to 128/512).
pub const SCALE_MIN: f64 = 16.0 / 512.0;
pub const SCALE_MAX: f64 = 128.0 / 512.0;
/// Maximum noise standard deviation on the 0–255 scale.
pub const NOISE_MAX: f64 = 25.5;
pub const JPEG_QUALITY_MIN: u8 = 60;
pub const JPEG_QUALITY_MAX: u8 = 85;

/// Blur kernel family applied before downscaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Average,
    Median,
    Motion,
}

impl KernelFamily {
    /// Inclusive kernel-size bounds for this family (odd sizes only).
    pub fn size_range(self) -> (usize, usize) {
        match self {
            KernelFamily::Motion => (5, 25),
            _ => (3, 15),
        }
    }
}

/// One resolved draw of the degradation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub kernel_family: KernelFamily,
    /// Odd kernel side within the family's range.
    pub kernel_size: usize,
    /// Motion-blur direction in degrees, `[0, 180)`; zero for other families.
    #[serde(default)]
    pub motion_angle: f64,
    /// Downscale factor relative to the HR side.
    pub scale: f64,
    /// AWGN standard deviation on the 0–255 scale.
    pub noise_level: f64,
    /// Standard JPEG quality factor.
    pub jpeg_quality: u8,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kernel_family.size_range();
        if self.kernel_size % 2 == 0 || self.kernel_size < lo || self.kernel_size > hi {
            return Err(Error::Contract(format!(
                "kernel size {} invalid for {:?} (odd, {lo}..={hi})",
                self.kernel_size, self.kernel_family
            )));
        }
        if !(0.0..180.0).contains(&self.motion_angle) {
            return Err(Error::Contract(format!(
                "motion angle {} outside [0, 180)",
                self.motion_angle
            )));
        }
        if !(SCALE_MIN..=SCALE_MAX).contains(&self.scale) {
            return Err(Error::Contract(format!(
                "scale {} outside [{SCALE_MIN}, {SCALE_MAX}]",
                self.scale
            )));
        }
        if !(0.0..=NOISE_MAX).contains(&self.noise_level) {
            return Err(Error::Contract(format!(
                "noise level {} outside [0, {NOISE_MAX}]",
                self.noise_level
            )));
        }
        if !(JPEG_QUALITY_MIN..=JPEG_QUALITY_MAX).contains(&self.jpeg_quality) {
            return Err(Error::Contract(format!(
                "jpeg quality {} outside [{JPEG_QUALITY_MIN}, {JPEG_QUALITY_MAX}]",
                self.jpeg_quality
            )));
        }
        Ok(())
    }
}

/// Identifies one sample's random stream within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSeed {
    pub global_seed: u64,
    pub sample_index: u64,
}

/// Draw degradation parameters for one sample. The draw order is fixed
/// (family, size, angle, scale, noise, quality) so manifests stay stable.
pub fn sample_params(seed: SampleSeed) -> DegradationParams {
    let mut rng = derive_rng(seed.global_seed, &[STREAM_PARAMS, seed.sample_index]);
    let kernel_family = match rng.random_range(0..4u32) {
        0 => KernelFamily::Gaussian,
        1 => KernelFamily::Average,
        2 => KernelFamily::Median,
        _ => KernelFamily::Motion,
    };
    let (lo, hi) = kernel_family.size_range();
    let options = (hi - lo) / 2 + 1;
    let kernel_size = lo + 2 * rng.random_range(0..options);
    let motion_angle = if kernel_family == KernelFamily::Motion {
        rng.random_range(0.0..180.0)
    } else {
        0.0
    };
    DegradationParams {
        kernel_family,
        kernel_size,
        motion_angle,
        scale: rng.random_range(SCALE_MIN..=SCALE_MAX),
        noise_level: rng.random_range(0.0..=NOISE_MAX),
        jpeg_quality: rng.random_range(JPEG_QUALITY_MIN..=JPEG_QUALITY_MAX),
    }
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Normalized 1-D Gaussian with `sigma = size / 6`.
fn gaussian_kernel(size: usize) -> Array1<f32> {
    let sigma = size as f64 / 6.0;
    let c = (size - 1) as f64 / 2.0;
    let mut k = Array1::from_shape_fn(size, |i| {
        let d = i as f64 - c;
        (-d * d / (2.0 * sigma * sigma)).exp() as f32
    });
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

/// Unit-mass line segment of length `size` at `angle_deg`, rasterized with
/// bilinear splatting so off-axis angles stay smooth.
fn motion_kernel(size: usize, angle_deg: f64) -> Array2<f32> {
    let mut k = Array2::<f32>::zeros((size, size));
    let c = (size - 1) as f64 / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    for t in 0..size {
        let off = t as f64 - c;
        let x = c + off * cos;
        let y = c - off * sin;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                if (0..size as isize).contains(&yy) && (0..size as isize).contains(&xx) {
                    k[[yy as usize, xx as usize]] += (wy * wx) as f32;
                }
            }
        }
    }
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

/// Horizontal then vertical 1-D convolution with edge replication.
fn separable_blur(plane: ArrayView2<f32>, kernel: &Array1<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Array2::<f32>::zeros((h, w));
    tmp.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(y, mut row)| {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in kernel.iter().enumerate() {
                    acc += kv * plane[[y, clamp_idx(x as isize + i as isize - r, w)]];
                }
                row[x] = acc;
            }
        });
    let mut out = Array2::<f32>::zeros((h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(y, mut row)| {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[[clamp_idx(y as isize + i as isize - r, h), x]];
                }
                row[x] = acc;
            }
        });
    out
}

/// Dense 2-D convolution with edge replication (motion kernels).
fn conv2_replicate(plane: ArrayView2<f32>, kernel: &Array2<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    let (kh, kw) = kernel.dim();
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut out = Array2::<f32>::zeros((h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(y, mut row)| {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let sy = clamp_idx(y as isize + ky as isize - ry, h);
                    for kx in 0..kw {
                        let sx = clamp_idx(x as isize + kx as isize - rx, w);
                        acc += kernel[[ky, kx]] * plane[[sy, sx]];
                    }
                }
                row[x] = acc;
            }
        });
    out
}

/// Exact sliding-window median with edge replication.
fn median_filter(plane: ArrayView2<f32>, size: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let r = (size / 2) as isize;
    let mid = size * size / 2;
    let mut out = Array2::<f32>::zeros((h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(y, mut row)| {
            let mut window = Vec::with_capacity(size * size);
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    let sy = clamp_idx(y as isize + dy, h);
                    for dx in -r..=r {
                        window.push(plane[[sy, clamp_idx(x as isize + dx, w)]]);
                    }
                }
                let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                row[x] = *m;
            }
        });
    out
}

/// Apply one blur family to every channel.
pub fn apply_blur(
    img: &ImageTensor,
    family: KernelFamily,
    size: usize,
    angle_deg: f64,
) -> Result<ImageTensor> {
    let (lo, hi) = family.size_range();
    if size % 2 == 0 || size < lo || size > hi {
        return Err(Error::Contract(format!(
            "kernel size {size} invalid for {family:?} (odd, {lo}..={hi})"
        )));
    }
    let data = img.data();
    let mut out = Array3::<f32>::zeros(data.raw_dim());
    for (c, plane) in data.axis_iter(Axis(0)).enumerate() {
        let filtered = match family {
            KernelFamily::Gaussian => separable_blur(plane, &gaussian_kernel(size)),
            KernelFamily::Average => {
                separable_blur(plane, &Array1::from_elem(size, 1.0 / size as f32))
            }
            KernelFamily::Median => median_filter(plane, size),
            KernelFamily::Motion => conv2_replicate(plane, &motion_kernel(size, angle_deg)),
        };
        out.index_axis_mut(Axis(0), c).assign(&filtered);
    }
    ImageTensor::new(out)
}

/// Run the full degradation: blur, bicubic downscale to `round(side*s)`,
/// AWGN (clipped), JPEG round trip, and bicubic upscale back to the input
/// side. Returns `(lr, lr_up)`.
pub fn degrade(
    img_h: &ImageTensor,
    p: &DegradationParams,
    seed: SampleSeed,
) -> Result<(ImageTensor, ImageTensor)> {
    if img_h.height() != img_h.width() {
        return Err(Error::Contract(format!(
            "degrade needs a square input, got {}x{}",
            img_h.height(),
            img_h.width()
        )));
    }
    p.validate()?;
    let side = img_h.height();
    let blurred = apply_blur(img_h, p.kernel_family, p.kernel_size, p.motion_angle)?;
    let lr_side = ((side as f64 * p.scale).round() as usize).max(1);
    let mut lr = resize(&blurred, lr_side, lr_side, ResizeMode::Bicubic)?;
    if p.noise_level > 0.0 {
        let mut rng = derive_rng(seed.global_seed, &[STREAM_NOISE, seed.sample_index]);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let sigma = (p.noise_level / 255.0) as f32;
        let mut data = lr.into_data();
        for v in data.iter_mut() {
            *v += sigma * normal.sample(&mut rng) as f32;
        }
        lr = ImageTensor::new(data)?;
    }
    let lr = jpeg_roundtrip(&lr.clamped(), p.jpeg_quality)?;
    let lr_up = resize(&lr, side, side, ResizeMode::Bicubic)?.clamped();
    Ok((lr, lr_up))
}

/// One resolved draw of the augmentation policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    /// Rescale factor in `[1.0, 1.3]` before center-cropping back.
    pub scale: f64,
    /// Quarter turns, `0..4`.
    pub rotation_quarters: u8,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_horizontal: false,
            scale: 1.0,
            rotation_quarters: 0,
        }
    }
}

/// Draw augmentation parameters: flip with probability 1/2, scale uniform in
/// `[1.0, 1.3]`, rotation uniform over the four quarter turns.
pub fn sample_augment(seed: SampleSeed) -> AugmentParams {
    let mut rng = derive_rng(seed.global_seed, &[STREAM_AUGMENT, seed.sample_index]);
    AugmentParams {
        flip_horizontal: rng.random_bool(0.5),
        scale: rng.random_range(1.0..=1.3),
        rotation_quarters: rng.random_range(0..4u8),
    }
}

fn rotate_quarters(data: &Array3<f32>, quarters: u8) -> Array3<f32> {
    let mut cur = data.clone();
    for _ in 0..(quarters % 4) {
        let (c, h, w) = cur.dim();
        let prev = cur;
        let mut next = Array3::<f32>::zeros((c, w, h));
        for ch in 0..c {
            for y in 0..w {
                for x in 0..h {
                    next[[ch, y, x]] = prev[[ch, x, w - 1 - y]];
                }
            }
        }
        cur = next;
    }
    cur
}

/// Apply an augmentation draw: flip, then rescale + center crop, then rotate.
pub fn apply_augment(img: &ImageTensor, p: &AugmentParams) -> Result<ImageTensor> {
    if img.height() != img.width() {
        return Err(Error::Contract(format!(
            "augment needs a square input, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let side = img.height();
    let mut data = img.data().clone();
    if p.flip_horizontal {
        data = data.slice(s![.., .., ..;-1]).to_owned();
    }
    let big = (side as f64 * p.scale).round() as usize;
    if big != side {
        let resized = resize(&ImageTensor::new(data)?, big, big, ResizeMode::Bicubic)?;
        let off = (big - side) / 2;
        data = resized
            .data()
            .slice(s![.., off..off + side, off..off + side])
            .to_owned();
    }
    if p.rotation_quarters % 4 != 0 {
        data = rotate_quarters(&data, p.rotation_quarters);
    }
    ImageTensor::new(data)
}

/// Draw and apply an augmentation in one step.
pub fn augment(img: &ImageTensor, seed: SampleSeed) -> Result<ImageTensor> {
    apply_augment(img, &sample_augment(seed))
}

/// One dataset-manifest line: enough to regenerate the sample exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub hr_path: String,
    pub global_seed: u64,
    pub sample_index: u64,
    pub params: DegradationParams,
}

/// Write manifest records as line-delimited JSON.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut out, rec)
            .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a line-delimited manifest, validating every record's parameters.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 1)))?;
        rec.params.validate()?;
        records.push(rec);
    }
    Ok(records)
}
