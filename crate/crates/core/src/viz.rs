//! Figures as PNG and CSV files: heatmaps, per-step map strips,
//! amplification histograms and loss landscapes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::diagnostics::Landscape;
use crate::error::{Error, Result};
use crate::imageio::{ensure_parent, save_rgb};
use crate::tensor::{Grid, Tensor};

/// Blue to red through cyan, yellow; `v` is clamped to `[0, 1]`.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let channel = |center: f64| {
        let d = (4.0 * v - center).abs();
        ((1.5 - d).clamp(0.0, 1.0) * 255.0).round() as u8
    };
    [channel(3.0), channel(2.0), channel(1.0)]
}

fn scaled(map: &Grid<f64>) -> Grid<f64> {
    let lo = map.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.max();
    if hi > lo {
        map.map(|v| (v - lo) / (hi - lo))
    } else {
        map.map(|_| 0.0)
    }
}

fn render(map: &Grid<f64>, scale: usize) -> RgbImage {
    let (h, w) = map.dims();
    let s = scale.max(1);
    RgbImage::from_fn((w * s) as u32, (h * s) as u32, |x, y| {
        Rgb(heat_color(*map.at(y as usize / s, x as usize / s)))
    })
}

/// Color-mapped `map` (values expected in `[0, 1]`), each cell drawn as a
/// `scale`×`scale` block.
pub fn save_heatmap(map: &Grid<f64>, scale: usize, path: &Path) -> Result<()> {
    save_rgb(&render(map, scale), path)
}

/// Half-and-half blend of the image (channel mean) and the heatmap of a
/// map at the same extents.
pub fn save_overlay(image: &Tensor, map: &Grid<f64>, path: &Path) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if map.dims() != (h, w) {
        return Err(Error::shape("save_overlay", &[h, w], &[map.height, map.width]));
    }
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let gray = (0..c).map(|ch| d[ch * h * w + i]).sum::<f64>() / c as f64;
        let g = gray.clamp(0.0, 1.0) * 255.0;
        let hc = heat_color(map.data[i]);
        Rgb(hc.map(|v| ((v as f64 + g) / 2.0).round() as u8))
    });
    save_rgb(&img, path)
}

/// Maps side by side with a one-pixel white separator.
pub fn save_strip(maps: &[Grid<f64>], scale: usize, path: &Path) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("save_strip", "no maps to draw"))?;
    let (h, w) = first.dims();
    if maps.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::invalid("save_strip", "maps differ in extents"));
    }
    let s = scale.max(1);
    let (tw, th) = (w * s, h * s);
    let total = maps.len() * tw + maps.len() - 1;
    let mut img = RgbImage::from_pixel(total as u32, th as u32, Rgb([255, 255, 255]));
    for (k, m) in maps.iter().enumerate() {
        let tile = render(m, s);
        let x0 = k * (tw + 1);
        for (x, y, p) in tile.enumerate_pixels() {
            img.put_pixel(x0 as u32 + x, y, *p);
        }
    }
    save_rgb(&img, path)
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi)`; values
/// outside the range go to the end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<u64> {
    let mut counts = vec![0; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for &v in values.iter().filter(|v| v.is_finite()) {
        let b = ((v - lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(counts.len() - 1) };
        counts[b] += 1;
    }
    counts
}

/// CSV with columns `bin_start,bin_end,<series...>`.
pub fn save_histogram_csv(series: &[(&str, &[f64])], bins: usize, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let counts: Vec<Vec<u64>> = series.iter().map(|(_, v)| histogram(v, bins, lo, hi)).collect();
    let width = (hi - lo) / bins.max(1) as f64;
    let mut out = String::from("bin_start,bin_end");
    for (name, _) in series {
        write!(out, ",{name}").expect("string write");
    }
    out.push('\n');
    for b in 0..bins.max(1) {
        write!(out, "{},{}", lo + b as f64 * width, lo + (b + 1) as f64 * width).expect("string write");
        for c in &counts {
            write!(out, ",{}", c[b]).expect("string write");
        }
        out.push('\n');
    }
    write_text(&out, path)
}

/// Overlaid bar chart of normalized histograms, one color per series.
pub fn save_histogram_png(series: &[(&str, &[f64])], bins: usize, lo: f64, hi: f64, path: &Path) -> Result<()> {
    const PALETTE: [[u8; 3]; 4] = [[220, 60, 40], [40, 90, 220], [40, 160, 60], [150, 60, 170]];
    let (bar, height) = (6u32, 120u32);
    let bins = bins.max(1);
    let mut img = RgbImage::from_pixel(bins as u32 * bar, height, Rgb([255, 255, 255]));
    for (k, (_, values)) in series.iter().enumerate() {
        let counts = histogram(values, bins, lo, hi);
        let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let color = PALETTE[k % PALETTE.len()];
        let offset = k as u32 * bar / series.len().max(1) as u32;
        let span = (bar / series.len().max(1) as u32).max(1);
        for (b, &c) in counts.iter().enumerate() {
            let top = height - ((c as f64 / peak) * (height - 1) as f64).round() as u32;
            for x in 0..span {
                for y in top..height {
                    img.put_pixel(b as u32 * bar + offset + x, y, Rgb(color));
                }
            }
        }
    }
    save_rgb(&img, path)
}

/// CSV rows `a,b,loss`.
pub fn save_landscape_csv(l: &Landscape, path: &Path) -> Result<()> {
    let mut out = String::from("a,b,loss\n");
    for (i, a) in l.coords.iter().enumerate() {
        for (j, b) in l.coords.iter().enumerate() {
            writeln!(out, "{a},{b},{}", l.values.at(i, j)).expect("string write");
        }
    }
    write_text(&out, path)
}

/// Heatmap of the loss rescaled to `[0, 1]`.
pub fn save_landscape_png(l: &Landscape, scale: usize, path: &Path) -> Result<()> {
    save_heatmap(&scaled(&l.values), scale, path)
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
