//! Minimal raster figures: field heatmaps and line charts written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

/// Blue-white-red map of `v` clipped to `[-range, range]`.
pub fn diverging(v: f64, range: f64) -> Rgb<u8> {
    let s = if range > 0.0 { (v / range).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |c: f64| (255.0 * (1.0 - c.abs())).round() as u8;
    if !s.is_finite() {
        Rgb([0, 0, 0])
    } else if s >= 0.0 {
        Rgb([255, fade(s), fade(s)])
    } else {
        Rgb([fade(s), fade(s), 255])
    }
}

/// `data` is row-major `[rows, cols]`: rows are time, columns space.
pub fn heatmap(data: &[f64], rows: usize, cols: usize, range: f64, scale: u32) -> Result<RgbImage> {
    if data.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Dimension {
            expected: rows * cols,
            got: data.len(),
        });
    }
    let scale = scale.max(1);
    let mut img = RgbImage::new(cols as u32 * scale, rows as u32 * scale);
    for (px, py, p) in img.enumerate_pixels_mut() {
        let (c, r) = ((px / scale) as usize, (py / scale) as usize);
        *p = diverging(data[r * cols + c], range);
    }
    Ok(img)
}

/// Horizontal concatenation with a white gutter.
pub fn side_by_side(panels: &[RgbImage]) -> RgbImage {
    let gap = 4;
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(width.max(1), height.max(1), BACKGROUND);
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + gap;
    }
    out
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
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

/// Line chart of several series sharing an x axis given by sample index.
/// Non-finite samples break the line. A dashed reference line is drawn at
/// `reference` when it lies inside the y range.
pub fn line_chart(series: &[Vec<f64>], width: u32, height: u32, reference: Option<f64>) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let margin = 8i64;
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if let Some(r) = reference {
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if !lo.is_finite() {
        return img;
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0).max(2);
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let to_px = |i: usize, v: f64| {
        let x = margin + (i as f64 / (len - 1) as f64 * w as f64).round() as i64;
        let y = margin + ((hi - v) / (hi - lo) * h as f64).round() as i64;
        (x, y)
    };
    draw_line(&mut img, (margin, margin), (margin, margin + h), AXIS);
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), AXIS);
    if let Some(r) = reference {
        let (_, y) = to_px(0, r);
        for x in (margin..margin + w).step_by(6) {
            draw_line(&mut img, (x, y), ((x + 2).min(margin + w), y), AXIS);
        }
    }
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                draw_line(&mut img, to_px(i - 1, s[i - 1]), to_px(i, s[i]), color);
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_map_endpoints() {
        assert_eq!(diverging(0.0, 1.0), Rgb([255, 255, 255]));
        assert_eq!(diverging(5.0, 1.0), Rgb([255, 0, 0]));
        assert_eq!(diverging(-1.0, 1.0), Rgb([0, 0, 255]));
    }

    #[test]
    fn heatmap_shape() {
        let img = heatmap(&[0.0; 6], 2, 3, 1.0, 2).unwrap();
        assert_eq!((img.width(), img.height()), (6, 4));
        assert!(heatmap(&[0.0; 5], 2, 3, 1.0, 1).is_err());
    }

    #[test]
    fn chart_draws_something() {
        let img = line_chart(&[vec![0.0, 1.0, 0.5]], 64, 48, Some(1.0));
        assert!(img.pixels().any(|p| *p == Rgb(PALETTE[0])));
    }
}
