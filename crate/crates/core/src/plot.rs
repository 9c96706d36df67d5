//! Minimal PNG line charts for loss and metric curves. No text rendering;
//! series are distinguished by color, with legend swatches in the top-left
//! corner, and the report files carry the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 24;

pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    /// (x, y) points in data coordinates; non-finite points are skipped.
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

impl Series {
    pub fn from_values(label: &str, values: &[f64], color_index: usize) -> Self {
        Self {
            label: label.to_string(),
            points: values
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as f64, v))
                .collect(),
            color: PALETTE[color_index % PALETTE.len()],
        }
    }
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut it = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let first = it.next()?;
    let mut b = (first.0, first.0, first.1, first.1);
    for &(x, y) in it {
        b.0 = b.0.min(x);
        b.1 = b.1.max(x);
        b.2 = b.2.min(y);
        b.3 = b.3.max(y);
    }
    // Avoid degenerate ranges.
    if b.0 == b.1 {
        b.1 += 1.0;
    }
    if b.2 == b.3 {
        b.3 += 1.0;
    }
    Some(b)
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    // Bresenham
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
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

/// Renders the series to a PNG file.
pub fn line_chart(path: &Path, series: &[Series]) -> Result<()> {
    let (x_min, x_max, y_min, y_max) = bounds(series)
        .ok_or_else(|| Error::Data("nothing to plot: no finite points".into()))?;
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN as f64 + (x - x_min) / (x_max - x_min) * plot_w;
        let py = (HEIGHT - MARGIN) as f64 - (y - y_min) / (y_max - y_min) * plot_h;
        (px.round() as i64, py.round() as i64)
    };
    // Axes
    let axis = Rgb([90, 90, 90]);
    draw_line(
        &mut img,
        (MARGIN as i64, MARGIN as i64),
        (MARGIN as i64, (HEIGHT - MARGIN) as i64),
        axis,
    );
    draw_line(
        &mut img,
        (MARGIN as i64, (HEIGHT - MARGIN) as i64),
        ((WIDTH - MARGIN) as i64, (HEIGHT - MARGIN) as i64),
        axis,
    );
    // Light horizontal gridlines at quarters.
    let grid = Rgb([225, 225, 225]);
    for q in 1..4 {
        let y = y_min + (y_max - y_min) * q as f64 / 4.0;
        let (ax, py) = to_px(x_min, y);
        let (bx, _) = to_px(x_max, y);
        draw_line(&mut img, (ax, py), (bx, py), grid);
    }
    for (si, s) in series.iter().enumerate() {
        let color = Rgb(s.color);
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        // Legend swatch.
        let y0 = MARGIN + 6 + si as u32 * 10;
        for dy in 0..6u32 {
            for dx in 0..18u32 {
                let (x, y) = (MARGIN + 8 + dx, y0 + dy);
                if x < WIDTH && y < HEIGHT {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write plot: {e}")))?;
    Ok(())
}
