//! PNG output: image contact sheets and simple line charts.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB raster.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, bg: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&bg);
        }
        Self { width, height, rgb }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let at = (y as usize * self.width + x as usize) * 3;
            self.rgb[at..at + 3].copy_from_slice(&c);
        }
    }

    pub fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
                self.set(x.round() as i64 + dx, y.round() as i64 + dy, c);
            }
        }
    }

    pub fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::Format { path: path.to_path_buf(), reason: e.to_string() };
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&self.rgb).map_err(err)?;
        Ok(())
    }
}

/// Lays out `[N,C,H,W]` images (values clamped to `[0,1]`) in a grid.
pub fn image_grid(images: &Tensor, cols: usize, scale: usize) -> Canvas {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let pad = 2;
    let (cw, ch) = (w * scale + pad, h * scale + pad);
    let mut canvas = Canvas::new(cols * cw + pad, rows * ch + pad, [40, 40, 40]);
    for k in 0..n {
        let (ox, oy) = ((k % cols) * cw + pad, (k / cols) * ch + pad);
        for i in 0..h * scale {
            for j in 0..w * scale {
                let px = |ci: usize| {
                    let v = images.data()[((k * c + ci) * h + i / scale) * w + j / scale];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                let rgb = if c >= 3 { [px(0), px(1), px(2)] } else { [px(0); 3] };
                canvas.set((ox + j) as i64, (oy + i) as i64, rgb);
            }
        }
    }
    canvas
}

pub fn write_image_grid(path: &Path, images: &Tensor, cols: usize, scale: usize) -> Result<()> {
    image_grid(images, cols, scale).write_png(path)
}

const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

/// Plots each series as a polyline on shared axes. Axis labels are not
/// rasterized; the caller records series names next to the PNG.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: usize, height: usize) -> Canvas {
    let mut canvas = Canvas::new(width, height, [255, 255, 255]);
    let pts: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let margin = 30.0;
    let (w, h) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
    let axis = [0, 0, 0];
    canvas.line((margin, margin), (margin, margin + h), axis);
    canvas.line((margin, margin + h), (margin + w, margin + h), axis);
    if pts.is_empty() {
        return canvas;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let map = |(x, y): (f64, f64)| (margin + (x - x0) / (x1 - x0) * w, margin + h - (y - y0) / (y1 - y0) * h);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for pair in s.windows(2) {
            canvas.line(map(pair[0]), map(pair[1]), color);
        }
        for &p in s {
            let (x, y) = map(p);
            canvas.rect(x as i64 - 2, y as i64 - 2, 5, 5, color);
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dimensions() {
        let t = Tensor::zeros(&[5, 1, 4, 4]);
        let c = image_grid(&t, 3, 2);
        assert_eq!((c.width, c.height), (3 * 10 + 2, 2 * 10 + 2));
    }

    #[test]
    fn png_written() {
        let dir = std::env::temp_dir().join(format!("spoofl-png-{}", std::process::id()));
        let p = dir.join("chart.png");
        line_chart(&[vec![(0.0, 1.0), (1.0, 2.0)], vec![(0.0, 0.5)]], 120, 80).write_png(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
