//! Minimal raster charts written as PNG: line plots for training curves
//! and bar charts for the ablation table. Axes and gridlines only; the
//! numbers themselves live in the CSV written next to each plot.

use std::path::Path;

use gca_resunet::training::{AblationTable, RunHistory};
use image::{Rgb, RgbImage};

use crate::CliError;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PALETTE: [Rgb<u8>; 10] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
    Rgb([188, 189, 34]),
    Rgb([23, 190, 207]),
];

/// A plotting rectangle with its data ranges.
struct Panel {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64) -> i64 {
        let t = (x - self.xr.0) / (self.xr.1 - self.xr.0).max(f64::MIN_POSITIVE);
        self.x0 + (t * (self.w - 1) as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let t = (y - self.yr.0) / (self.yr.1 - self.yr.0).max(f64::MIN_POSITIVE);
        self.y0 + self.h - 1 - (t * (self.h - 1) as f64).round() as i64
    }

    fn frame(&self, img: &mut RgbImage) {
        for i in 1..5 {
            let y = self.y0 + self.h * i / 5;
            hline(img, self.x0, self.x0 + self.w - 1, y, GRID);
        }
        hline(img, self.x0, self.x0 + self.w - 1, self.y0 + self.h - 1, AXIS);
        vline(img, self.x0, self.y0, self.y0 + self.h - 1, AXIS);
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn hline(img: &mut RgbImage, x0: i64, x1: i64, y: i64, c: Rgb<u8>) {
    (x0.min(x1)..=x0.max(x1)).for_each(|x| put(img, x, y, c));
}

fn vline(img: &mut RgbImage, x: i64, y0: i64, y1: i64, c: Rgb<u8>) {
    (y0.min(y1)..=y0.max(y1)).for_each(|y| put(img, x, y, c));
}

fn fill(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        hline(img, x0, x1, y, c);
    }
}

/// Bresenham, drawn two pixels thick.
fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        put(img, x0, y0 + 1, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn polyline(img: &mut RgbImage, p: &Panel, pts: &[(f64, f64)], c: Rgb<u8>) {
    for w in pts.windows(2) {
        line(img, (p.px(w[0].0), p.py(w[0].1)), (p.px(w[1].0), p.py(w[1].1)), c);
    }
    for &(x, y) in pts {
        fill(img, p.px(x) - 1, p.py(y) - 1, p.px(x) + 1, p.py(y) + 1, c);
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::io(path, std::io::Error::other(e.to_string())))
}

/// Left: train total (blue), Dice (orange) and CE (green) loss per epoch.
/// Right: validation mean DSC (red) on a fixed [0, 1] axis.
pub fn loss_curve(history: &RunHistory, path: &Path) -> Result<(), CliError> {
    let mut img = RgbImage::from_pixel(800, 360, WHITE);
    let n = history.epochs.len().max(2) as f64;
    let ymax = history
        .epochs
        .iter()
        .flat_map(|e| [e.train_loss, e.train_dice, e.train_ce])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let left = Panel {
        x0: 40,
        y0: 20,
        w: 340,
        h: 300,
        xr: (1.0, n),
        yr: (0.0, ymax),
    };
    let right = Panel {
        x0: 440,
        y0: 20,
        w: 340,
        h: 300,
        xr: (1.0, n),
        yr: (0.0, 1.0),
    };
    left.frame(&mut img);
    right.frame(&mut img);
    let series = |f: fn(&gca_resunet::training::EpochRecord) -> f64| -> Vec<(f64, f64)> {
        history.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
    };
    polyline(&mut img, &left, &series(|e| e.train_loss), PALETTE[0]);
    polyline(&mut img, &left, &series(|e| e.train_dice), PALETTE[1]);
    polyline(&mut img, &left, &series(|e| e.train_ce), PALETTE[2]);
    let val: Vec<(f64, f64)> = history
        .epochs
        .iter()
        .filter_map(|e| e.val_mean.map(|v| (e.epoch as f64, v)))
        .collect();
    polyline(&mut img, &right, &val, PALETTE[3]);
    save(&img, path)
}

/// Left: mean DSC per variant on [0, 1]. Right: parameter delta against
/// the plain network, scaled to the largest delta. One colour per variant.
pub fn ablation_bars(table: &AblationTable, path: &Path) -> Result<(), CliError> {
    let mut img = RgbImage::from_pixel(800, 360, WHITE);
    let n = table.rows.len().max(1) as i64;
    let max_delta = table.rows.iter().map(|r| r.param_delta.unsigned_abs()).max().unwrap_or(0).max(1) as f64;
    let min_delta = table.rows.iter().map(|r| r.param_delta).min().unwrap_or(0).min(0) as f64;
    let panels = [
        Panel {
            x0: 40,
            y0: 20,
            w: 340,
            h: 300,
            xr: (0.0, n as f64),
            yr: (0.0, 1.0),
        },
        Panel {
            x0: 440,
            y0: 20,
            w: 340,
            h: 300,
            xr: (0.0, n as f64),
            yr: (min_delta, max_delta),
        },
    ];
    for (pi, p) in panels.iter().enumerate() {
        p.frame(&mut img);
        let zero = p.py(0.0);
        for (i, r) in table.rows.iter().enumerate() {
            let v = if pi == 0 { r.mean_dsc } else { r.param_delta as f64 };
            let (xa, xb) = (p.px(i as f64 + 0.15), p.px(i as f64 + 0.85));
            fill(&mut img, xa, zero, xb, p.py(v), PALETTE[i % PALETTE.len()]);
        }
        hline(&mut img, p.x0, p.x0 + p.w - 1, zero, AXIS);
    }
    save(&img, path)
}
