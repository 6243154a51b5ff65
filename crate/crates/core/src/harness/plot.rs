//! PNG charts: loss curves, ablation bars and Grad-CAM overlays.
//!
//! Charts carry no text; series colours are fixed (blue train loss or SPRC, orange
//! validation loss or LCC, green validation SPRC) and rows follow the ranked table order.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::ablation::AblationTable;
use super::gradcam::{resize_map, Heatmap};
use super::train::EpochRecord;
use crate::error::{Error, Result};

pub const LOSS_CURVE_FILE: &str = "loss_curve.png";
pub const ABLATION_FILE: &str = "ablation.png";

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 32;
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
const GREEN: Rgb<u8> = Rgb([44, 160, 44]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const OVERLAY_ALPHA: f64 = 0.45;

pub fn heatmap_file(layer: &str) -> String {
    let safe: String = layer.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    format!("heatmap_{safe}.png")
}

/// A plotting rectangle in pixel space mapping `[x0, x1] × [y0, y1]` data ranges.
struct Panel {
    left: i64,
    top: i64,
    right: i64,
    bottom: i64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = if self.x.1 > self.x.0 { (x - self.x.0) / (self.x.1 - self.x.0) } else { 0.5 };
        let fy = if self.y.1 > self.y.0 { (y - self.y.0) / (self.y.1 - self.y.0) } else { 0.5 };
        (
            self.left + (fx * (self.right - self.left) as f64).round() as i64,
            self.bottom - (fy * (self.bottom - self.top) as f64).round() as i64,
        )
    }

    fn frame(&self, img: &mut RgbImage) {
        for k in 1..5 {
            let y = self.top + (self.bottom - self.top) * k / 5;
            line(img, (self.left, y), (self.right, y), GRID, 1);
        }
        if self.y.0 < 0.0 && self.y.1 > 0.0 {
            let (_, y0) = self.px(self.x.0, 0.0);
            line(img, (self.left, y0), (self.right, y0), AXIS, 1);
        }
        line(img, (self.left, self.bottom), (self.right, self.bottom), AXIS, 1);
        line(img, (self.left, self.top), (self.left, self.bottom), AXIS, 1);
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn rect(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            put(img, x, y, c);
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thickness: i64) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let x = x0 + ((x1 - x0) * i + steps / 2 * (x1 - x0).signum()) / steps;
        let y = y0 + ((y1 - y0) * i + steps / 2 * (y1 - y0).signum()) / steps;
        rect(img, (x, y), (x + thickness - 1, y + thickness - 1), c);
    }
}

fn polyline(img: &mut RgbImage, panel: &Panel, points: &[(f64, f64)], c: Rgb<u8>) {
    let px: Vec<(i64, i64)> = points.iter().map(|&(x, y)| panel.px(x, y)).collect();
    for w in px.windows(2) {
        line(img, w[0], w[1], c, 2);
    }
    for &(x, y) in &px {
        rect(img, (x - 2, y - 2), (x + 2, y + 2), c);
    }
}

fn range(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - if include_zero && lo == 0.0 { 0.0 } else { pad }, hi + pad)
}

fn save(img: &RgbImage, dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let path = dir.join(name);
    img.save_with_format(&path, image::ImageFormat::Png)?;
    Ok(path)
}

/// Training and validation loss (top panel) and validation SPRC/LCC (bottom panel) per epoch.
pub fn render_loss_curve(log: &[EpochRecord]) -> Result<RgbImage> {
    if log.is_empty() {
        return Err(Error::NothingToPlot);
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let xs = (log[0].epoch as f64, log[log.len() - 1].epoch as f64);
    let mid = HEIGHT as i64 / 2;
    let top = Panel {
        left: MARGIN,
        top: MARGIN / 2,
        right: WIDTH as i64 - MARGIN / 2,
        bottom: mid - MARGIN / 2,
        x: xs,
        y: range(log.iter().flat_map(|r| [r.train_loss, r.val_loss]), true),
    };
    let bottom = Panel {
        top: mid + MARGIN / 2,
        bottom: HEIGHT as i64 - MARGIN,
        y: range(log.iter().flat_map(|r| [r.sprc_mean, r.lcc_mean]), true),
        ..top
    };
    top.frame(&mut img);
    bottom.frame(&mut img);
    let series = |f: fn(&EpochRecord) -> f64| -> Vec<(f64, f64)> { log.iter().map(|r| (r.epoch as f64, f(r))).collect() };
    polyline(&mut img, &top, &series(|r| r.train_loss), BLUE);
    polyline(&mut img, &top, &series(|r| r.val_loss), ORANGE);
    polyline(&mut img, &bottom, &series(|r| r.lcc_mean), ORANGE);
    polyline(&mut img, &bottom, &series(|r| r.sprc_mean), GREEN);
    if let Some(best) = log.iter().rev().find(|r| r.best) {
        let (x, _) = bottom.px(best.epoch as f64, 0.0);
        line(&mut img, (x, bottom.top), (x, bottom.bottom), AXIS, 1);
    }
    Ok(img)
}

/// SPRC and LCC bar pairs per successful row, in ranked order.
pub fn render_ablation(table: &AblationTable) -> Result<RgbImage> {
    let rows: Vec<_> = table.ranked().into_iter().filter_map(|r| r.report.as_ref()).collect();
    if rows.is_empty() {
        return Err(Error::NothingToPlot);
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let panel = Panel {
        left: MARGIN,
        top: MARGIN / 2,
        right: WIDTH as i64 - MARGIN / 2,
        bottom: HEIGHT as i64 - MARGIN,
        x: (0.0, rows.len() as f64),
        y: range(rows.iter().flat_map(|m| [m.sprc_mean, m.lcc_mean]), true),
    };
    panel.frame(&mut img);
    let slot = (panel.right - panel.left) / rows.len() as i64;
    let bar = (slot / 3).max(1);
    for (i, m) in rows.iter().enumerate() {
        let x = panel.left + slot * i as i64 + slot / 6;
        let (_, zero) = panel.px(0.0, 0.0);
        for (k, (v, c)) in [(m.sprc_mean, BLUE), (m.lcc_mean, ORANGE)].into_iter().enumerate() {
            let (_, y) = panel.px(0.0, v);
            let x0 = x + k as i64 * bar;
            rect(&mut img, (x0, zero), (x0 + bar - 2, y), c);
        }
    }
    Ok(img)
}

/// Jet colour ramp: dark blue at 0, green at 0.5, dark red at 1.
fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let f = |d: f64| (1.5 - (4.0 * v - d).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// The heatmap resized to the source image and alpha-blended over it.
pub fn render_overlay(heatmap: &Heatmap, source: &RgbImage) -> Result<RgbImage> {
    if heatmap.values.is_empty() || source.width() == 0 || source.height() == 0 {
        return Err(Error::NothingToPlot);
    }
    let (w, h) = (source.width() as usize, source.height() as usize);
    let map = resize_map(&heatmap.values, h, w);
    Ok(RgbImage::from_fn(source.width(), source.height(), |x, y| {
        let base = source.get_pixel(x, y).0;
        let c = ramp(map[[y as usize, x as usize]]);
        let mut out = [0u8; 3];
        for k in 0..3 {
            let v = (1.0 - OVERLAY_ALPHA) * base[k] as f64 + OVERLAY_ALPHA * 255.0 * c[k];
            out[k] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    }))
}

pub fn plot_loss_curve(log: &[EpochRecord], dir: &Path) -> Result<PathBuf> {
    save(&render_loss_curve(log)?, dir, LOSS_CURVE_FILE)
}

pub fn plot_ablation(table: &AblationTable, dir: &Path) -> Result<PathBuf> {
    save(&render_ablation(table)?, dir, ABLATION_FILE)
}

pub fn plot_overlay(heatmap: &Heatmap, source: &RgbImage, dir: &Path) -> Result<PathBuf> {
    save(&render_overlay(heatmap, source)?, dir, &heatmap_file(&heatmap.layer_name))
}
