//! Image primitives shared by every other module.
//!
//! Images live in memory as channel-major `f32` arrays in `[0, 1]`;
//! 8-bit quantization only happens at file boundaries. All operations here
//! are pure functions of their inputs and safe to call concurrently.

use std::io::Cursor;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::{Error, Result};

/// BT.601 studio-swing luminance coefficients for RGB in `[0, 1]`.
/// `Y = 65.481 R + 128.553 G + 24.966 B + 16`, so `Y` spans `[16, 235]`.
const LUMA_R: f32 = 65.481;
const LUMA_G: f32 = 128.553;
const LUMA_B: f32 = 24.966;
const LUMA_OFFSET: f32 = 16.0;

/// Channel-major floating-point image.
///
/// Shape is `(channels, height, width)` with 1 or 3 channels. Values are in
/// `[0, 1]` unless noted otherwise (the luminance image produced by
/// [`rgb_to_luminance`] uses the `[16, 235]` studio-swing range).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wrap an array, validating shape and finiteness.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::Contract(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if h < 1 || w < 1 {
            return Err(Error::Contract(format!(
                "image dimensions must be at least 1x1, got {h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    /// Internal constructor for data already known to be valid.
    pub(crate) fn from_valid(data: Array3<f32>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    /// Constant-valued image.
    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Clamp every entry into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }
}

/// Convert a 3-channel RGB image in `[0, 1]` to the BT.601 studio-swing
/// luminance channel. Output entries lie in `[16, 235]`.
pub fn rgb_to_luminance(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::Contract(format!(
            "luminance conversion needs a 3-channel image, got {}",
            img.channels()
        )));
    }
    let d = img.data();
    let r = d.index_axis(Axis(0), 0);
    let g = d.index_axis(Axis(0), 1);
    let b = d.index_axis(Axis(0), 2);
    let mut y = Array2::<f32>::zeros((img.height(), img.width()));
    ndarray::Zip::from(&mut y)
        .and(&r)
        .and(&g)
        .and(&b)
        .for_each(|y, &r, &g, &b| {
            *y = LUMA_R * r + LUMA_G * g + LUMA_B * b + LUMA_OFFSET;
        });
    Ok(ImageTensor::from_valid(y.insert_axis(Axis(0))))
}

/// Resampling mode for [`resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Keys cubic kernel with a = -0.5, support 2.
fn keys_cubic(x: f32) -> f32 {
    const A: f32 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

fn triangle(x: f32) -> f32 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

/// Per-output-index tap list for one axis of a separable resample.
struct AxisWeights {
    /// For each destination index: first source index and tap weights.
    taps: Vec<(usize, Vec<f32>)>,
}

/// Build half-pixel-aligned, edge-clamped weights for one axis.
///
/// When shrinking, the kernel is stretched by the scale ratio so the filter
/// acts as an antialiasing low-pass (the convention used by high-quality
/// resamplers); when enlarging, the kernel keeps its natural support.
fn axis_weights(src: usize, dst: usize, kernel: fn(f32) -> f32, support: f32) -> AxisWeights {
    let ratio = src as f32 / dst as f32;
    let filter_scale = ratio.max(1.0);
    let radius = support * filter_scale;
    let mut taps = Vec::with_capacity(dst);
    for i in 0..dst {
        let center = (i as f32 + 0.5) * ratio - 0.5;
        let lo = (center - radius).ceil() as isize;
        let hi = (center + radius).floor() as isize;
        let mut weights = Vec::with_capacity((hi - lo + 1).max(1) as usize);
        let mut sum = 0.0f32;
        for t in lo..=hi {
            let w = kernel((t as f32 - center) / filter_scale);
            weights.push(w);
            sum += w;
        }
        if sum.abs() < 1e-12 {
            weights = vec![1.0];
            sum = 1.0;
        }
        for w in &mut weights {
            *w /= sum;
        }
        // Edge clamp: fold out-of-range taps onto the border pixels.
        let lo_clamped = lo.clamp(0, src as isize - 1) as usize;
        let hi_clamped = hi.clamp(0, src as isize - 1) as usize;
        let mut compact = vec![0.0f32; hi_clamped - lo_clamped + 1];
        for (k, w) in weights.iter().enumerate() {
            let idx = (lo + k as isize).clamp(0, src as isize - 1) as usize;
            compact[idx - lo_clamped] += w;
        }
        taps.push((lo_clamped, compact));
    }
    AxisWeights { taps }
}

/// Resample one axis (the height axis of a `(h, w)` plane).
fn resample_rows(plane: &Array2<f32>, weights: &AxisWeights, dst_h: usize) -> Array2<f32> {
    let w = plane.dim().1;
    let mut out = Array2::<f32>::zeros((dst_h, w));
    for (i, (start, taps)) in weights.taps.iter().enumerate() {
        let mut row = out.row_mut(i);
        for (k, &wt) in taps.iter().enumerate() {
            let src_row = plane.row(start + k);
            ndarray::Zip::from(&mut row).and(&src_row).for_each(|o, &s| *o += wt * s);
        }
    }
    out
}

/// Resize an image to `target_h` x `target_w`.
///
/// Bicubic uses the Keys kernel (a = -0.5) with half-pixel center alignment
/// and edge clamping; shrinking is antialiased. Output is clamped to `[0, 1]`
/// for bilinear/bicubic (which can overshoot); nearest is exact.
pub fn resize(img: &ImageTensor, target_h: usize, target_w: usize, mode: ResizeMode) -> Result<ImageTensor> {
    if target_h < 1 || target_w < 1 {
        return Err(Error::Contract(format!(
            "resize target must be at least 1x1, got {target_h}x{target_w}"
        )));
    }
    let (c, h, w) = img.data().dim();
    if (h, w) == (target_h, target_w) {
        return Ok(img.clone());
    }
    if mode == ResizeMode::Nearest {
        let mut out = Array3::<f32>::zeros((c, target_h, target_w));
        let sy = h as f32 / target_h as f32;
        let sx = w as f32 / target_w as f32;
        for ch in 0..c {
            let src = img.data().index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), ch);
            for i in 0..target_h {
                let si = (((i as f32 + 0.5) * sy).floor() as usize).min(h - 1);
                for j in 0..target_w {
                    let sj = (((j as f32 + 0.5) * sx).floor() as usize).min(w - 1);
                    dst[(i, j)] = src[(si, sj)];
                }
            }
        }
        return Ok(ImageTensor::from_valid(out));
    }

    let (kernel, support): (fn(f32) -> f32, f32) = match mode {
        ResizeMode::Bilinear => (triangle, 1.0),
        ResizeMode::Bicubic => (keys_cubic, 2.0),
        ResizeMode::Nearest => unreachable!(),
    };
    let wy = axis_weights(h, target_h, kernel, support);
    let wx = axis_weights(w, target_w, kernel, support);

    let mut out = Array3::<f32>::zeros((c, target_h, target_w));
    for ch in 0..c {
        let plane = img.data().index_axis(Axis(0), ch).to_owned();
        // Separable: rows first, then columns via transpose.
        let tmp = resample_rows(&plane, &wy, target_h);
        let tmp_t = tmp.t().to_owned();
        let res_t = resample_rows(&tmp_t, &wx, target_w);
        let res = res_t.t();
        out.index_axis_mut(Axis(0), ch).assign(&res);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(ImageTensor::from_valid(out))
}

/// Decode a PNG or JPEG file into a 3-channel image in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::image(path, format!("decode failed: {e}")))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut data = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch, y as usize, x as usize)] = px.0[ch] as f32 / 255.0;
        }
    }
    ImageTensor::new(data)
}

fn to_rgb8(img: &ImageTensor) -> image::RgbImage {
    let (c, h, w) = img.data().dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if c == 3 {
                [
                    quantize(img.data()[(0, y, x)]),
                    quantize(img.data()[(1, y, x)]),
                    quantize(img.data()[(2, y, x)]),
                ]
            } else {
                let v = quantize(img.data()[(0, y, x)]);
                [v, v, v]
            };
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an image as 8-bit PNG. Single-channel images are written as grayscale.
pub fn write_image(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    if img.channels() == 1 {
        let (_, h, w) = img.data().dim();
        let mut gray = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                gray.put_pixel(x as u32, y as u32, image::Luma([quantize(img.data()[(0, y, x)])]));
            }
        }
        gray.save(path)
            .map_err(|e| Error::image(path, format!("encode failed: {e}")))
    } else {
        to_rgb8(img)
            .save(path)
            .map_err(|e| Error::image(path, format!("encode failed: {e}")))
    }
}

/// JPEG round-trip in memory at the given quality factor (1-100, standard
/// semantics: higher quality means weaker compression).
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let rgb = to_rgb8(img);
    let mut buf = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality);
    rgb.write_with_encoder(encoder)
        .map_err(|e| Error::Contract(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory(&buf)
        .map_err(|e| Error::Contract(format!("jpeg decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let mut data = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in decoded.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch, y as usize, x as usize)] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(ImageTensor::from_valid(data))
}
