//! Static PNG histograms of cosine-similarity series.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;

/// Bin counts of `values` over `[lo, hi]` with `bins` equal bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !v.is_finite() {
            continue;
        }
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        let i = (t.max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

fn blend(px: &mut Rgb<u8>, color: [u8; 3], alpha: f32) {
    for k in 0..3 {
        px.0[k] = (px.0[k] as f32 * (1.0 - alpha) + color[k] as f32 * alpha).round() as u8;
    }
}

/// Overlaid histograms over `[-1, 1]`, one translucent colour per series,
/// with axes and a tick at every 0.1.
pub fn write_cosine_histogram(
    path: impl AsRef<Path>,
    series: &[(&[f64], [u8; 3])],
    bins: usize,
) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    let all: Vec<Vec<usize>> = series
        .iter()
        .map(|(v, _)| histogram(v, -1.0, 1.0, bins))
        .collect();
    let peak = all.iter().flatten().copied().max().unwrap_or(1).max(1);
    let bar_w = plot_w as f64 / bins as f64;

    for (counts, (_, color)) in all.iter().zip(series) {
        for (i, &c) in counts.iter().enumerate() {
            let h = (c as f64 / peak as f64 * plot_h as f64).round() as u32;
            let x0 = MARGIN + (i as f64 * bar_w).round() as u32;
            let x1 = MARGIN + ((i + 1) as f64 * bar_w).round() as u32;
            for x in x0..x1.saturating_sub(1) {
                for y in (HEIGHT - MARGIN - h)..(HEIGHT - MARGIN) {
                    blend(img.get_pixel_mut(x, y), *color, 0.55);
                }
            }
        }
    }

    let black = Rgb([0, 0, 0]);
    for x in MARGIN..=WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, black);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, black);
    }
    for t in 0..=20 {
        let x = MARGIN + (t as f64 / 20.0 * plot_w as f64).round() as u32;
        let len = if t % 5 == 0 { 8 } else { 4 };
        for y in HEIGHT - MARGIN..HEIGHT - MARGIN + len {
            img.put_pixel(x.min(WIDTH - 1), y, black);
        }
    }

    img.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::Write {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        })
}

/// Fig-3 colours: green for the raw series, blue for the equalized one.
pub const RAW_COLOR: [u8; 3] = [40, 170, 60];
pub const EQUALIZED_COLOR: [u8; 3] = [40, 90, 220];
