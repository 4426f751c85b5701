//! Binary PPM figures: match overlays, uncertainty heatmaps and span
//! overlays.

use std::io::Write;
use std::path::Path;

use crate::attention::SpanGrid;
use crate::error::{Error, Result};
use crate::flow::{grid_to_pixel, FlowMap};
use crate::matcher::MatchSet;
use crate::tensor::Tensor;

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn new(height: usize, width: usize) -> Rgb {
        Rgb { height, width, data: vec![0; height * width * 3] }
    }

    /// Grayscale (or first three channels) of an `[H, W, C]` image in `[0, 1]`.
    pub fn from_image(image: &Tensor) -> Result<Rgb> {
        let (h, w, c) = image.hwd()?;
        let mut out = Rgb::new(h, w);
        for k in 0..h * w {
            for ch in 0..3 {
                let v = image.data()[k * c + ch.min(c - 1)];
                out.data[k * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(out)
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let k = (y as usize * self.width + x as usize) * 3;
            self.data[k..k + 3].copy_from_slice(&color);
        }
    }

    pub fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.put((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, color);
        }
    }

    pub fn rect(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [u8; 3]) {
        self.line((x0, y0), (x1, y0), color);
        self.line((x1, y0), (x1, y1), color);
        self.line((x1, y1), (x0, y1), color);
        self.line((x0, y1), (x0, y0), color);
    }

    /// Places `other` to the right of `self`.
    pub fn hconcat(&self, other: &Rgb) -> Result<Rgb> {
        if self.height != other.height {
            return Err(Error::dim("side-by-side images need equal heights"));
        }
        let w = self.width + other.width;
        let mut out = Rgb::new(self.height, w);
        for y in 0..self.height {
            let dst = &mut out.data[y * w * 3..(y + 1) * w * 3];
            dst[..self.width * 3].copy_from_slice(&self.data[y * self.width * 3..(y + 1) * self.width * 3]);
            dst[self.width * 3..].copy_from_slice(&other.data[y * other.width * 3..(y + 1) * other.width * 3]);
        }
        Ok(out)
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }
}

/// Blue at `t = 0` to red at `t = 1`.
pub fn blue_red(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Images side by side with a line per fine match, colored by score.
pub fn match_overlay(image_a: &Tensor, image_b: &Tensor, matches: &MatchSet) -> Result<Rgb> {
    let a = Rgb::from_image(image_a)?;
    let b = Rgb::from_image(image_b)?;
    let offset = a.width as f64;
    let mut out = a.hconcat(&b)?;
    for m in &matches.fine {
        out.line((m.x_a, m.y_a), (m.x_b + offset, m.y_b), blue_red(m.score));
    }
    Ok(out)
}

/// Per-cell color over `log sigma`, linear between the map's extremes;
/// smaller uncertainty is warmer. Blended over the image at half opacity.
pub fn uncertainty_heatmap(image: &Tensor, flow: &FlowMap) -> Result<Rgb> {
    let mut out = Rgb::from_image(image)?;
    let (h, w) = flow.extent();
    let log_s: Vec<f64> = (0..h * w)
        .map(|k| {
            let [_, _, sx, sy] = flow.cell(k / w, k % w);
            0.5 * (sx.ln() + sy.ln())
        })
        .collect();
    let lo = log_s.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = log_s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let s = flow.stride;
    for y in 0..out.height {
        for x in 0..out.width {
            let (i, j) = ((y / s).min(h - 1), (x / s).min(w - 1));
            let c = blue_red(1.0 - (log_s[i * w + j] - lo) / span);
            let k = (y * out.width + x) * 3;
            for ch in 0..3 {
                out.data[k + ch] = ((out.data[k + ch] as u16 + c[ch] as u16) / 2) as u8;
            }
        }
    }
    Ok(out)
}

/// Query cells outlined on A and their spans outlined on B, same color per
/// cell. `stride` is the span grid's stride in pixels.
pub fn span_overlay(image_a: &Tensor, image_b: &Tensor, spans: &SpanGrid, stride: usize) -> Result<Rgb> {
    let a = Rgb::from_image(image_a)?;
    let b = Rgb::from_image(image_b)?;
    let offset = a.width as f64;
    let mut out = a.hconcat(&b)?;
    let n = spans.cells.len().max(2) - 1;
    let half = stride as f64 / 2.0;
    for (k, cell) in spans.cells.iter().enumerate() {
        let color = blue_red(k as f64 / n as f64);
        let px = |g: f64| grid_to_pixel(g, stride);
        out.rect(
            (px(cell.cols.start as f64) - half, px(cell.rows.start as f64) - half),
            (px((cell.cols.end - 1) as f64) + half, px((cell.rows.end - 1) as f64) + half),
            color,
        );
        let ((x0, x1), (y0, y1)) = cell.rect;
        out.rect((px(x0) + offset, px(y0)), (px(x1) + offset, px(y1)), color);
    }
    Ok(out)
}
