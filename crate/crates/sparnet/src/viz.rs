//! PNG renderings: false-color error maps, grayscale attention maps, and
//! the evaluation-PSNR training curve.
//!
//! Everything here is deterministic pixel pushing — no text shaping or GPU
//! involved — so rendered artifacts are byte-stable across runs, which the
//! run manifests rely on.

use ndarray::{Array2, Array3};

use crate::imaging::{resize, ImageTensor, ResizeMode};
use crate::trainkit::LogRecord;
use crate::{Error, Result};

/// Jet-style heat ramp on `[0, 1]`: dark blue through green to dark red.
pub fn heat(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let seg = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [seg(3.0), seg(2.0), seg(1.0)]
}

/// Render a non-negative scalar map as a false-color image. Values are
/// scaled so `max` (the map's own maximum when `None`) hits full heat.
pub fn render_heatmap(map: &Array2<f64>, max: Option<f64>) -> ImageTensor {
    let top = max
        .unwrap_or_else(|| map.iter().cloned().fold(0.0f64, f64::max))
        .max(f64::MIN_POSITIVE);
    let (h, w) = map.dim();
    let mut data = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let rgb = heat((map[(y, x)] / top) as f32);
            for c in 0..3 {
                data[(c, y, x)] = rgb[c];
            }
        }
    }
    ImageTensor::new(data).expect("heat ramp output is finite")
}

/// Render an attention map in `[0, 1]` as a grayscale image,
/// nearest-upscaled to `side` when given so coarse maps stay blocky
/// rather than smoothed.
pub fn render_attention(map: &Array2<f32>, side: Option<usize>) -> Result<ImageTensor> {
    let (h, w) = map.dim();
    let mut data = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            data[(0, y, x)] = map[(y, x)].clamp(0.0, 1.0);
        }
    }
    let img = ImageTensor::new(data)?;
    match side {
        Some(s) if s != h || s != w => resize(&img, s, s, ResizeMode::Nearest),
        _ => Ok(img),
    }
}

const PLOT_WIDTH: usize = 640;
const PLOT_HEIGHT: usize = 480;
const MARGIN_LEFT: usize = 48;
const MARGIN_RIGHT: usize = 16;
const MARGIN_TOP: usize = 16;
const MARGIN_BOTTOM: usize = 28;

/// 3x5 bitmap glyphs for digits, minus, and the decimal point; each row
/// holds three bits, most significant on the left.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0; 5],
    }
}

fn put(canvas: &mut Array3<f32>, x: i64, y: i64, rgb: [f32; 3]) {
    let (_, h, w) = canvas.dim();
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        for c in 0..3 {
            canvas[(c, y as usize, x as usize)] = rgb[c];
        }
    }
}

fn draw_text(canvas: &mut Array3<f32>, x: i64, y: i64, text: &str, scale: i64, rgb: [f32; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..3 {
                if row >> (2 - rx) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(
                                canvas,
                                cx + rx as i64 * scale + dx,
                                y + ry as i64 * scale + dy,
                                rgb,
                            );
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

fn text_width(text: &str, scale: i64) -> i64 {
    text.chars().count() as i64 * 4 * scale - scale
}

/// Sampled segment drawing; dense enough that consecutive samples touch.
fn draw_line(canvas: &mut Array3<f32>, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [f32; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1) * 2;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        put(canvas, x.round() as i64, y.round() as i64, rgb);
    }
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Render the evaluation-PSNR-versus-iteration curve from a training log.
/// Fails when the log holds no evaluation records.
pub fn render_psnr_curve(records: &[LogRecord]) -> Result<ImageTensor> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.eval_psnr_db.map(|p| (r.iter as f64, p)))
        .collect();
    if points.is_empty() {
        return Err(Error::Contract(
            "the log holds no evaluation records to plot".into(),
        ));
    }
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_hi == x_lo {
        x_hi = x_lo + 1.0;
    }
    // Pad the value axis so a flat curve does not sit on the border.
    let pad = ((y_hi - y_lo) * 0.08).max(0.25);
    y_lo -= pad;
    y_hi += pad;

    let mut canvas = Array3::from_elem((3, PLOT_HEIGHT, PLOT_WIDTH), 1.0f32);
    let left = MARGIN_LEFT as f64;
    let right = (PLOT_WIDTH - MARGIN_RIGHT) as f64;
    let top = MARGIN_TOP as f64;
    let bottom = (PLOT_HEIGHT - MARGIN_BOTTOM) as f64;
    let to_px = |x: f64, y: f64| {
        (
            left + (x - x_lo) / (x_hi - x_lo) * (right - left),
            bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top),
        )
    };

    let black = [0.0, 0.0, 0.0];
    let grid = [0.85, 0.85, 0.85];
    let line = [0.1, 0.25, 0.7];

    for &ty in &nice_ticks(y_lo, y_hi, 5) {
        let (_, py) = to_px(x_lo, ty);
        draw_line(&mut canvas, left, py, right, py, grid);
        let label = format!("{ty:.1}");
        draw_text(
            &mut canvas,
            MARGIN_LEFT as i64 - text_width(&label, 2) - 6,
            py as i64 - 5,
            &label,
            2,
            black,
        );
    }
    for &tx in &nice_ticks(x_lo, x_hi, 5) {
        let (px, _) = to_px(tx, y_lo);
        draw_line(&mut canvas, px, top, px, bottom, grid);
        let label = format!("{}", tx.round() as i64);
        draw_text(
            &mut canvas,
            px as i64 - text_width(&label, 2) / 2,
            bottom as i64 + 6,
            &label,
            2,
            black,
        );
    }
    draw_line(&mut canvas, left, top, left, bottom, black);
    draw_line(&mut canvas, left, bottom, right, bottom, black);

    for pair in points.windows(2) {
        let (x0, y0) = to_px(pair[0].0, pair[0].1);
        let (x1, y1) = to_px(pair[1].0, pair[1].1);
        draw_line(&mut canvas, x0, y0, x1, y1, line);
    }
    for &(x, y) in &points {
        let (px, py) = to_px(x, y);
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                put(&mut canvas, px.round() as i64 + dx, py.round() as i64 + dy, line);
            }
        }
    }
    ImageTensor::new(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn heat_ramp_hits_the_documented_endpoints() {
        assert_eq!(heat(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(heat(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(heat(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(heat(-3.0), heat(0.0));
        assert_eq!(heat(7.0), heat(1.0));
    }

    #[test]
    fn heatmap_scales_to_the_map_maximum() {
        let mut map = Array2::zeros((4, 6));
        map[(2, 3)] = 8.0;
        let img = render_heatmap(&map, None);
        assert_eq!((img.channels(), img.height(), img.width()), (3, 4, 6));
        // The peak renders at full heat, zeros at the cold end.
        for c in 0..3 {
            assert_abs_diff_eq!(img.data()[(c, 2, 3)], heat(1.0)[c]);
            assert_abs_diff_eq!(img.data()[(c, 0, 0)], heat(0.0)[c]);
        }
        // An explicit ceiling rescales: the same peak sits at half heat.
        let img = render_heatmap(&map, Some(16.0));
        for c in 0..3 {
            assert_abs_diff_eq!(img.data()[(c, 2, 3)], heat(0.5)[c]);
        }
    }

    #[test]
    fn attention_render_is_blocky_grayscale() {
        let map = Array2::from_shape_fn((2, 2), |(y, x)| (y * 2 + x) as f32 / 3.0);
        let img = render_attention(&map, Some(4)).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (1, 4, 4));
        // Nearest upscale: each source texel fills a 2x2 block.
        for (sy, sx, v) in [(0, 0, 0.0), (0, 2, 1.0 / 3.0), (2, 0, 2.0 / 3.0), (2, 2, 1.0)] {
            for dy in 0..2 {
                for dx in 0..2 {
                    assert_abs_diff_eq!(img.data()[(0, sy + dy, sx + dx)], v);
                }
            }
        }
        let plain = render_attention(&map, None).unwrap();
        assert_eq!((plain.height(), plain.width()), (2, 2));
    }

    fn toy_log() -> Vec<LogRecord> {
        (1..=5)
            .map(|i| LogRecord {
                iter: i * 100,
                g_loss: 1.0 / i as f64,
                d_loss: None,
                eval_psnr_db: Some(20.0 + i as f64),
            })
            .collect()
    }

    #[test]
    fn curve_renders_into_the_plot_area() {
        let img = render_psnr_curve(&toy_log()).unwrap();
        assert_eq!((img.height(), img.width()), (PLOT_HEIGHT, PLOT_WIDTH));
        // White background in the top-right data region corner.
        assert_abs_diff_eq!(img.data()[(0, 0, PLOT_WIDTH - 1)], 1.0);
        // Some blue curve pixels exist strictly inside the axes box.
        let blue = img
            .data()
            .indexed_iter()
            .filter(|&((c, y, x), &v)| {
                c == 2
                    && v > 0.6
                    && y > MARGIN_TOP
                    && y < PLOT_HEIGHT - MARGIN_BOTTOM
                    && x > MARGIN_LEFT
                    && x < PLOT_WIDTH - MARGIN_RIGHT
            })
            .count();
        assert!(blue > 100, "curve missing: {blue} colored pixels");
        // Axis labels put black text left of the axis line.
        let dark = img
            .data()
            .indexed_iter()
            .filter(|&((c, _, x), &v)| c == 0 && v == 0.0 && x < MARGIN_LEFT)
            .count();
        assert!(dark > 20, "no tick labels rendered");
    }

    #[test]
    fn curve_rendering_is_deterministic_and_needs_eval_points() {
        let a = render_psnr_curve(&toy_log()).unwrap();
        let b = render_psnr_curve(&toy_log()).unwrap();
        assert_eq!(a.data(), b.data());

        let bare = vec![LogRecord {
            iter: 10,
            g_loss: 1.0,
            d_loss: None,
            eval_psnr_db: None,
        }];
        let err = render_psnr_curve(&bare).err().expect("must fail");
        assert!(err.to_string().contains("evaluation"));

        // A single point still renders (degenerate ranges get padded).
        let one = vec![LogRecord {
            iter: 10,
            g_loss: 1.0,
            d_loss: None,
            eval_psnr_db: Some(30.0),
        }];
        render_psnr_curve(&one).unwrap();
    }
}
