//! Luminance-channel quality metrics and corpus-level aggregation.
//!
//! PSNR and SSIM are computed on the BT.601 luminance channel in `[16,235]`
//! units. SSIM uses the standard 11×11 Gaussian window (σ = 1.5) with
//! K1 = 0.01, K2 = 0.03 and L = 255, and returns a full-resolution local map
//! via reflect padding so error maps line up with the input pixels. A small
//! plug-in trait lets external perceptual metrics ride along in reports
//! without this crate depending on them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::{read_image, rgb_to_luminance, ImageTensor};
use crate::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 6.5025; // (0.01 * 255)^2
const C2: f64 = 58.5225; // (0.03 * 255)^2

fn luminance_f64(img: &ImageTensor) -> Result<Array2<f64>> {
    let y = rgb_to_luminance(img)?;
    let plane = y.data().index_axis(ndarray::Axis(0), 0).to_owned();
    Ok(plane.mapv(|v| v as f64))
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::Contract(format!(
            "metric inputs differ in shape: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on the luminance channel:
/// `10·log10(255² / MSE_Y)`. Identical inputs return `+∞`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let ya = luminance_f64(a)?;
    let yb = luminance_f64(b)?;
    let mse = (&ya - &yb).mapv(|d| d * d).mean().expect("non-empty image");
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Whole-sample reflection: `-1 → 1`, `n → n-2`.
fn reflect_idx(i: isize, n: usize) -> usize {
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period.max(1));
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW - 1) as f64 / 2.0;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable windowed mean with reflect padding; keeps the input size.
fn window_mean(x: &Array2<f64>, w: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, wd) = x.dim();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, wd));
    for y in 0..h {
        for col in 0..wd {
            let mut acc = 0.0;
            for (i, &wv) in w.iter().enumerate() {
                acc += wv * x[[y, reflect_idx(col as isize + i as isize - r, wd)]];
            }
            tmp[[y, col]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, wd));
    for y in 0..h {
        for col in 0..wd {
            let mut acc = 0.0;
            for (i, &wv) in w.iter().enumerate() {
                acc += wv * tmp[[reflect_idx(y as isize + i as isize - r, h), col]];
            }
            out[[y, col]] = acc;
        }
    }
    out
}

/// Structural similarity on the luminance channel. Returns the mean score
/// and the per-pixel local map (the mean of the map equals the score).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<(f64, Array2<f64>)> {
    check_same_shape(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs sides >= {SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let ya = luminance_f64(a)?;
    let yb = luminance_f64(b)?;
    let w = gaussian_window();
    let mu_a = window_mean(&ya, &w);
    let mu_b = window_mean(&yb, &w);
    let var_a = window_mean(&(&ya * &ya), &w) - &mu_a * &mu_a;
    let var_b = window_mean(&(&yb * &yb), &w) - &mu_b * &mu_b;
    let cov = window_mean(&(&ya * &yb), &w) - &mu_a * &mu_b;
    let mut map = Array2::<f64>::zeros(ya.raw_dim());
    ndarray::Zip::from(&mut map)
        .and(&mu_a)
        .and(&mu_b)
        .and(&var_a)
        .and(&var_b)
        .and(&cov)
        .for_each(|m, &ma, &mb, &va, &vb, &c| {
            *m = ((2.0 * ma * mb + C1) * (2.0 * c + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        });
    let mean = map.mean().expect("non-empty map");
    Ok((mean, map))
}

/// Per-pixel error maps: squared luminance error and `1 − local SSIM`.
#[derive(Debug, Clone)]
pub struct ErrorMaps {
    pub psnr_error: Array2<f64>,
    pub ssim_error: Array2<f64>,
}

/// Error maps for one (sr, hr) pair.
pub fn error_maps(sr: &ImageTensor, hr: &ImageTensor) -> Result<ErrorMaps> {
    let ya = luminance_f64(sr)?;
    let yb = luminance_f64(hr)?;
    let (_, local) = ssim(sr, hr)?;
    Ok(ErrorMaps {
        psnr_error: (&ya - &yb).mapv(|d| d * d),
        ssim_error: local.mapv(|s| 1.0 - s),
    })
}

/// Elementwise mean of per-pair error maps over a corpus.
pub fn average_error_maps(pairs: &[(ImageTensor, ImageTensor)]) -> Result<ErrorMaps> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Contract("average_error_maps needs at least one pair".into()))?;
    let dim = (first.0.height(), first.0.width());
    let mut psnr_acc = Array2::<f64>::zeros(dim);
    let mut ssim_acc = Array2::<f64>::zeros(dim);
    for (sr, hr) in pairs {
        if (sr.height(), sr.width()) != dim {
            return Err(Error::Contract(
                "error-map averaging needs equal resolutions across the corpus".into(),
            ));
        }
        let maps = error_maps(sr, hr)?;
        psnr_acc += &maps.psnr_error;
        ssim_acc += &maps.ssim_error;
    }
    let n = pairs.len() as f64;
    Ok(ErrorMaps {
        psnr_error: psnr_acc / n,
        ssim_error: ssim_acc / n,
    })
}

/// External metric plugged into corpus evaluation (e.g. a learned
/// perceptual distance). Implementations must be pure per image pair.
pub trait ExtraMetric: Sync {
    fn name(&self) -> &str;
    /// Implementation/version string recorded alongside the scores.
    fn provenance(&self) -> String {
        self.name().to_string()
    }
    fn score(&self, sr: &ImageTensor, hr: &ImageTensor) -> Result<f64>;
}

/// Scores for one image pair. `psnr_db = None` encodes the infinite
/// (identical-images) sentinel, which serializes as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

/// Corpus-level aggregate; any infinite per-image PSNR makes the mean
/// infinite, reported as the same `null` sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub count: usize,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_means: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub per_image: Vec<ImageScore>,
    pub summary: CorpusSummary,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Score one pair with the built-in metrics plus any plug-ins.
pub fn score_pair(
    name: &str,
    sr: &ImageTensor,
    hr: &ImageTensor,
    plugins: &[&dyn ExtraMetric],
) -> Result<ImageScore> {
    let psnr_db = finite_or_none(psnr(sr, hr)?);
    let (ssim_mean, _) = ssim(sr, hr)?;
    let mut extra = BTreeMap::new();
    for plugin in plugins {
        extra.insert(plugin.name().to_string(), plugin.score(sr, hr)?);
    }
    Ok(ImageScore {
        name: name.to_string(),
        psnr_db,
        ssim: ssim_mean,
        extra,
    })
}

/// Sorted PNG/JPEG filenames directly under `dir`.
pub fn image_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Evaluate every image in `sr_dir` against the same-named file in
/// `hr_dir`, in filename order.
pub fn evaluate_corpus(
    sr_dir: &Path,
    hr_dir: &Path,
    plugins: &[&dyn ExtraMetric],
) -> Result<CorpusReport> {
    let names = image_names(sr_dir)?;
    if names.is_empty() {
        return Err(Error::Contract(format!("no images found in {}", sr_dir.display())));
    }
    let per_image: Vec<ImageScore> = names
        .par_iter()
        .map(|name| {
            let hr_path = hr_dir.join(name);
            if !hr_path.exists() {
                return Err(Error::Contract(format!(
                    "no reference image for {name} in {}",
                    hr_dir.display()
                )));
            }
            let sr = read_image(&sr_dir.join(name))?;
            let hr = read_image(&hr_path)?;
            score_pair(name, &sr, &hr, plugins)
        })
        .collect::<Result<_>>()?;
    let count = per_image.len();
    let mean_psnr_db = per_image
        .iter()
        .map(|s| s.psnr_db.unwrap_or(f64::INFINITY))
        .sum::<f64>()
        .pipe_mean(count);
    let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / count as f64;
    let mut extra_means = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for plugin in plugins {
        let mean = per_image
            .iter()
            .map(|s| s.extra[plugin.name()])
            .sum::<f64>()
            / count as f64;
        extra_means.insert(plugin.name().to_string(), mean);
        provenance.insert(plugin.name().to_string(), plugin.provenance());
    }
    Ok(CorpusReport {
        per_image,
        summary: CorpusSummary {
            count,
            mean_psnr_db,
            mean_ssim,
            extra_means,
            provenance,
        },
    })
}

trait PipeMean {
    fn pipe_mean(self, count: usize) -> Option<f64>;
}

impl PipeMean for f64 {
    fn pipe_mean(self, count: usize) -> Option<f64> {
        finite_or_none(self / count as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: CorpusSummary,
}

/// Write a report as line-delimited JSON: one line per image, then a final
/// `{"summary": …}` line.
pub fn write_report(report: &CorpusReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for score in &report.per_image {
        serde_json::to_writer(&mut out, score)
            .map_err(|e| Error::Config(format!("report encode: {e}")))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    serde_json::to_writer(
        &mut out,
        &SummaryLine {
            summary: report.summary.clone(),
        },
    )
    .map_err(|e| Error::Config(format!("report encode: {e}")))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a report previously written by [`write_report`].
pub fn read_report(path: &Path) -> Result<CorpusReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut per_image = Vec::new();
    let mut summary = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(s) = serde_json::from_str::<SummaryLine>(&line) {
            summary = Some(s.summary);
        } else {
            let score: ImageScore = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("report line: {e}")))?;
            per_image.push(score);
        }
    }
    let summary =
        summary.ok_or_else(|| Error::Config("report is missing its summary line".into()))?;
    Ok(CorpusReport { per_image, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::write_image;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    /// Sum of the BT.601 RGB weights: a uniform RGB shift of `1/LUMA_SUM`
    /// moves the luminance by exactly one level.
    const LUMA_SUM: f32 = 219.0;

    fn textured(side: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((3, side, side), |(c, y, x)| {
            0.2 + 0.6 * ((c * 37 + y * 11 + x * 7) % 23) as f32 / 23.0
        }))
        .unwrap()
    }

    fn shifted(img: &ImageTensor, levels: f32) -> ImageTensor {
        ImageTensor::new(img.data().mapv(|v| v + levels / LUMA_SUM)).unwrap()
    }

    #[test]
    fn identical_images_have_infinite_psnr_and_unit_ssim() {
        let img = textured(24);
        assert_eq!(psnr(&img, &img).unwrap(), f64::INFINITY);
        let (score, map) = ssim(&img, &img).unwrap();
        assert_abs_diff_eq!(score, 1.0, epsilon = 1e-9);
        assert!(map.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn one_level_luminance_error_gives_known_db() {
        let img = ImageTensor::constant(3, 16, 16, 0.3).unwrap();
        let off = shifted(&img, 1.0);
        let db = psnr(&img, &off).unwrap();
        assert_abs_diff_eq!(db, 20.0 * 255.0f64.log10(), epsilon = 0.01);
    }

    #[test]
    fn doubling_the_error_costs_six_db() {
        let img = ImageTensor::constant(3, 16, 16, 0.4).unwrap();
        let a = psnr(&img, &shifted(&img, 2.0)).unwrap();
        let b = psnr(&img, &shifted(&img, 4.0)).unwrap();
        assert_abs_diff_eq!(a - b, 20.0 * 2.0f64.log10(), epsilon = 0.01);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = textured(20);
        let b = shifted(&textured(20), 5.0);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap(), epsilon = 1e-9);
        let (sa, _) = ssim(&a, &b).unwrap();
        let (sb, _) = ssim(&b, &a).unwrap();
        assert_abs_diff_eq!(sa, sb, epsilon = 1e-9);
    }

    #[test]
    fn constant_shift_matches_the_zero_variance_closed_form() {
        let img = ImageTensor::constant(3, 16, 16, 0.4).unwrap();
        let off = shifted(&img, 10.0);
        let (score, _) = ssim(&img, &off).unwrap();
        // Zero variances: the contrast/structure factor is exactly 1 and
        // SSIM reduces to the luminance comparison term.
        let mu1 = (16.0 + LUMA_SUM * 0.4) as f64;
        let mu2 = mu1 + 10.0;
        let want = (2.0 * mu1 * mu2 + C1) / (mu1 * mu1 + mu2 * mu2 + C1);
        assert_abs_diff_eq!(score, want, epsilon = 1e-5);
    }

    #[test]
    fn local_map_mean_equals_the_scalar() {
        let a = textured(32);
        let b = shifted(&textured(32), 3.0);
        let (score, map) = ssim(&a, &b).unwrap();
        assert_eq!(map.dim(), (32, 32));
        assert_abs_diff_eq!(score, map.mean().unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn ssim_rises_toward_one_as_the_shift_shrinks() {
        let img = ImageTensor::constant(3, 16, 16, 0.5).unwrap();
        let mut last = -1.0;
        for levels in [20.0, 10.0, 5.0, 1.0] {
            let (score, _) = ssim(&img, &shifted(&img, levels)).unwrap();
            assert!(score > last, "ssim must rise as the shift shrinks");
            last = score;
        }
        assert!(last > 0.999);
    }

    #[test]
    fn tiny_images_are_rejected_for_ssim() {
        let img = textured(8);
        assert!(ssim(&img, &img).is_err());
        let other = textured(12);
        assert!(psnr(&img, &other).is_err());
    }

    #[test]
    fn error_maps_are_zero_for_identical_pairs_and_bounded() {
        let img = textured(16);
        let maps = error_maps(&img, &img).unwrap();
        assert!(maps.psnr_error.iter().all(|&v| v == 0.0));
        assert!(maps.ssim_error.iter().all(|&v| v.abs() < 1e-9));

        let noisy = shifted(&img, 8.0);
        let maps = error_maps(&img, &noisy).unwrap();
        assert!(maps.psnr_error.iter().all(|&v| v >= 0.0));
        assert!(maps.ssim_error.iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn squared_error_map_peaks_at_the_perturbed_pixel() {
        let img = textured(16);
        let mut data = img.data().clone();
        data[[0, 5, 9]] = (data[[0, 5, 9]] + 0.45).min(1.0);
        let hot = ImageTensor::new(data).unwrap();
        let maps = error_maps(&img, &hot).unwrap();
        let mut best = (0, 0);
        let mut best_v = -1.0;
        for y in 0..16 {
            for x in 0..16 {
                if maps.psnr_error[[y, x]] > best_v {
                    best_v = maps.psnr_error[[y, x]];
                    best = (y, x);
                }
            }
        }
        assert_eq!(best, (5, 9));
    }

    #[test]
    fn averaging_two_pairs_is_the_elementwise_mean() {
        let base = textured(16);
        let a = shifted(&base, 4.0);
        let b = shifted(&base, 9.0);
        let avg = average_error_maps(&[(base.clone(), a.clone()), (base.clone(), b.clone())])
            .unwrap();
        let ma = error_maps(&base, &a).unwrap();
        let mb = error_maps(&base, &b).unwrap();
        let want = (&ma.psnr_error + &mb.psnr_error) / 2.0;
        assert_abs_diff_eq!(
            avg.psnr_error.as_slice().unwrap(),
            want.as_slice().unwrap(),
            epsilon = 1e-12
        );
        let want = (&ma.ssim_error + &mb.ssim_error) / 2.0;
        assert_abs_diff_eq!(
            avg.ssim_error.as_slice().unwrap(),
            want.as_slice().unwrap(),
            epsilon = 1e-12
        );
    }

    struct MeanAbsDiff;

    impl ExtraMetric for MeanAbsDiff {
        fn name(&self) -> &str {
            "mad"
        }
        fn provenance(&self) -> String {
            "builtin mean-absolute-difference for tests".into()
        }
        fn score(&self, sr: &ImageTensor, hr: &ImageTensor) -> Result<f64> {
            Ok((sr.data() - hr.data()).mapv(|d| d.abs() as f64).mean().unwrap())
        }
    }

    #[test]
    fn corpus_evaluation_pairs_by_sorted_name() {
        let dir = tempfile::tempdir().unwrap();
        let sr_dir = dir.path().join("sr");
        let hr_dir = dir.path().join("hr");
        std::fs::create_dir_all(&sr_dir).unwrap();
        std::fs::create_dir_all(&hr_dir).unwrap();
        let img_a = textured(16);
        let img_b = shifted(&textured(16), 6.0).clamped();
        for (name, sr, hr) in [
            ("b.png", &img_b, &img_a),
            ("a.png", &img_a, &img_a),
        ] {
            write_image(sr, &sr_dir.join(name)).unwrap();
            write_image(hr, &hr_dir.join(name)).unwrap();
        }
        let mad = MeanAbsDiff;
        let report = evaluate_corpus(&sr_dir, &hr_dir, &[&mad]).unwrap();
        assert_eq!(report.summary.count, 2);
        assert_eq!(report.per_image[0].name, "a.png");
        assert_eq!(report.per_image[1].name, "b.png");
        // a.png is compared against itself: infinite PSNR drives the mean
        // to the sentinel.
        assert_eq!(report.per_image[0].psnr_db, None);
        assert!(report.per_image[1].psnr_db.unwrap() > 10.0);
        assert_eq!(report.summary.mean_psnr_db, None);
        assert!(report.summary.mean_ssim > 0.9);
        assert!(report.summary.extra_means.contains_key("mad"));
        assert_eq!(
            report.summary.provenance["mad"],
            "builtin mean-absolute-difference for tests"
        );
    }

    #[test]
    fn missing_reference_images_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let sr_dir = dir.path().join("sr");
        let hr_dir = dir.path().join("hr");
        std::fs::create_dir_all(&sr_dir).unwrap();
        std::fs::create_dir_all(&hr_dir).unwrap();
        write_image(&textured(16), &sr_dir.join("only.png")).unwrap();
        let err = evaluate_corpus(&sr_dir, &hr_dir, &[]).err().expect("must fail");
        assert!(err.to_string().contains("only.png"), "unhelpful error: {err}");
    }

    #[test]
    fn reports_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let sr_dir = dir.path().join("sr");
        let hr_dir = dir.path().join("hr");
        std::fs::create_dir_all(&sr_dir).unwrap();
        std::fs::create_dir_all(&hr_dir).unwrap();
        let img = textured(16);
        let off = shifted(&img, 3.0).clamped();
        write_image(&off, &sr_dir.join("x.png")).unwrap();
        write_image(&img, &hr_dir.join("x.png")).unwrap();
        let report = evaluate_corpus(&sr_dir, &hr_dir, &[]).unwrap();
        let path = dir.path().join("report.jsonl");
        write_report(&report, &path).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back, report);
    }
}
