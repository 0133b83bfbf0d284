//! Minimal raster figures: line plots, bar charts and segmentation panels.
//! No text rendering; the numbers behind each figure sit next to it as CSV.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GREY: Rgb<u8> = Rgb([160, 160, 160]);
pub const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
pub const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
pub const RED: Rgb<u8> = Rgb([214, 39, 40]);
pub const GREEN: Rgb<u8> = Rgb([44, 160, 44]);
const MARGIN: u32 = 24;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn frame(w: u32, h: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let (l, r, t, b) = (MARGIN as i64, (w - MARGIN) as i64, MARGIN as i64, (h - MARGIN) as i64);
    line(&mut img, (l, b), (r, b), GREY);
    line(&mut img, (l, t), (l, b), GREY);
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Each series against its index, on one shared y range.
pub fn line_plot(path: &Path, series: &[(&[f64], Rgb<u8>)]) -> Result<()> {
    let (w, h) = (640u32, 400u32);
    let mut img = frame(w, h);
    let n = series.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(2);
    let (lo, hi) = range(series.iter().flat_map(|(s, _)| s.iter().copied()));
    let sx = |i: usize| MARGIN as f64 + i as f64 / (n - 1) as f64 * (w - 2 * MARGIN) as f64;
    let sy = |v: f64| (h - MARGIN) as f64 - (v - lo) / (hi - lo) * (h - 2 * MARGIN) as f64;
    for (s, c) in series {
        let pts: Vec<(i64, i64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (sx(i).round() as i64, sy(v).round() as i64))
            .collect();
        for p in pts.windows(2) {
            line(&mut img, p[0], p[1], *c);
        }
        if pts.len() == 1 {
            put(&mut img, pts[0].0, pts[0].1, *c);
        }
    }
    save(&img, path)
}

/// One bar per value, baseline at zero or the smallest value if negative.
pub fn bar_chart(path: &Path, values: &[f64], color: Rgb<u8>) -> Result<()> {
    let (w, h) = (480u32, 360u32);
    let mut img = frame(w, h);
    let lo = values.iter().copied().fold(0.0, f64::min);
    let (_, hi) = range(values.iter().copied().chain([lo]));
    let slot = (w - 2 * MARGIN) as f64 / values.len().max(1) as f64;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let top = (h - MARGIN) as f64 - (v - lo) / (hi - lo) * (h - 2 * MARGIN) as f64;
        let x0 = (MARGIN as f64 + slot * (i as f64 + 0.15)) as u32;
        let x1 = (MARGIN as f64 + slot * (i as f64 + 0.85)) as u32;
        for x in x0..x1 {
            for y in top.round().max(0.0) as u32..(h - MARGIN) {
                img.put_pixel(x, y, color);
            }
        }
    }
    save(&img, path)
}

fn gray(v: f64, lo: f64, hi: f64) -> u8 {
    ((v - lo) / (hi - lo) * 255.0).clamp(0.0, 255.0) as u8
}

/// Intensity image with a translucent overlay where `mask` holds.
fn overlay(img: &mut RgbImage, x0: u32, image: &Array2<f64>, mask: &Array2<bool>, c: Rgb<u8>) {
    let (lo, hi) = range(image.iter().copied());
    for ((y, x), &v) in image.indexed_iter() {
        let g = gray(v, lo, hi) as f64;
        let px = if mask[[y, x]] {
            Rgb([0, 1, 2].map(|k| (0.5 * g + 0.5 * c.0[k] as f64) as u8))
        } else {
            Rgb([g as u8; 3])
        };
        img.put_pixel(x0 + x as u32, y as u32, px);
    }
}

/// Support with its mask, query with the truth, query with the prediction.
pub fn triptych(
    path: &Path,
    support: &Array2<f64>,
    support_mask: &Array2<bool>,
    query: &Array2<f64>,
    truth: &Array2<bool>,
    pred: &Array2<bool>,
) -> Result<()> {
    let (h, w) = support.dim();
    let (qh, qw) = query.dim();
    let gap = 4;
    let mut img = RgbImage::from_pixel((w + 2 * qw) as u32 + 2 * gap, h.max(qh) as u32, WHITE);
    overlay(&mut img, 0, support, support_mask, GREEN);
    overlay(&mut img, w as u32 + gap, query, truth, GREEN);
    overlay(&mut img, (w + qw) as u32 + 2 * gap, query, pred, RED);
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_hits_both_ends() {
        let mut img = RgbImage::from_pixel(10, 10, WHITE);
        line(&mut img, (1, 8), (7, 2), BLACK);
        assert_eq!(*img.get_pixel(1, 8), BLACK);
        assert_eq!(*img.get_pixel(7, 2), BLACK);
        assert_eq!(img.pixels().filter(|&&p| p == BLACK).count(), 7);
    }
}
