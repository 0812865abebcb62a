//! Minimal raster charts (no text) for batch reports.

use image::{Rgb, RgbImage};

pub const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

const MARGIN: u32 = 16;
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);

fn blank(width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, height - MARGIN, AXIS);
    }
    for y in MARGIN..=height - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One polyline per series of `(x, y)` points, sharing axes. Non-finite points are skipped.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> RgbImage {
    let mut img = blank(width, height);
    let (x_lo, x_hi) = finite_range(series.iter().flatten().map(|p| p.0));
    let (y_lo, y_hi) = finite_range(series.iter().flatten().map(|p| p.1));
    let plot_w = (width - 2 * MARGIN) as f64;
    let plot_h = (height - 2 * MARGIN) as f64;
    let to_px = |(x, y): (f64, f64)| {
        (MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * plot_w, (height - MARGIN) as f64 - (y - y_lo) / (y_hi - y_lo) * plot_h)
    };
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<_> = s.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).map(to_px).collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
        if let [p] = pts.as_slice() {
            draw_line(&mut img, *p, *p, color);
        }
    }
    img
}

/// Grouped bars: `groups[g][s]` is series `s` in group `g`. Bars start at zero.
pub fn bar_chart(groups: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut img = blank(width, height);
    let n_series = groups.iter().map(Vec::len).max().unwrap_or(0);
    if groups.is_empty() || n_series == 0 {
        return img;
    }
    let (_, hi) = finite_range(groups.iter().flatten().copied().chain(std::iter::once(0.0)));
    let hi = hi.max(1e-12);
    let plot_w = width - 2 * MARGIN;
    let plot_h = (height - 2 * MARGIN) as f64;
    let group_w = plot_w / groups.len() as u32;
    let bar_w = (group_w.saturating_sub(4) / n_series as u32).max(1);
    for (g, vals) in groups.iter().enumerate() {
        for (s, &v) in vals.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let h = (v.max(0.0) / hi * plot_h).round() as u32;
            let x0 = MARGIN + 1 + g as u32 * group_w + 2 + s as u32 * bar_w;
            for x in x0..(x0 + bar_w).min(width - MARGIN) {
                for y in (height - MARGIN - h)..(height - MARGIN) {
                    img.put_pixel(x, y, Rgb(PALETTE[s % PALETTE.len()]));
                }
            }
        }
    }
    img
}

/// Histogram counts of `values` over `bins` equal cells spanning `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &v in values {
        if v >= lo && v <= hi && bins > 0 {
            let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
            counts[k.min(bins - 1)] += 1;
        }
    }
    counts
}
