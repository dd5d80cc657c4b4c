//! Minimal raster output: binary PGM (P5) / PPM (P6) images, bilinear
//! upsampling, and the two plot styles the reports need.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rgb(pub u8, pub u8, pub u8);

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = v;
        }
    }

    /// Single-pixel rectangle outline; corners are inclusive pixel indices.
    pub fn outline(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: u8) {
        for x in x0..=x1 {
            self.set(x, y0, v);
            self.set(x, y1, v);
        }
        for y in y0..=y1 {
            self.set(x0, y, v);
            self.set(x1, y, v);
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&[c.0, c.1, c.2]);
        }
        RgbImage { width, height, pixels }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&[c.0, c.1, c.2]);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
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

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Parsed binary PNM: magic (`"P5"` or `"P6"`), width, height, raw pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Reads the P5/P6 files this module writes (no comments, maxval 255).
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Pnm> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let magic = fields[0].clone();
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field {s:?}")));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != width * height * channels {
        return Err(Error::Corruption("PNM payload length does not match header".into()));
    }
    Ok(Pnm { magic, width, height, pixels })
}

/// Bilinear resampling of a row-major `rows x cols` grid to `out_h x out_w`,
/// sampling at pixel centers and clamping at the borders.
pub fn upsample_bilinear(values: &[f64], rows: usize, cols: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(values.len(), rows * cols);
    let src = |r: usize, c: usize| values[r * cols + c];
    let coord = |dst: usize, n_dst: usize, n_src: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (r0, r1, fy) = coord(y, out_h, rows);
        for x in 0..out_w {
            let (c0, c1, fx) = coord(x, out_w, cols);
            let top = src(r0, c0) * (1.0 - fx) + src(r0, c1) * fx;
            let bottom = src(r1, c0) * (1.0 - fx) + src(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max scales values to 0..=255; a constant input maps to 0.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo || hi.is_nan() {
        return vec![0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

const BACKGROUND: Rgb = Rgb(255, 255, 255);
const AXIS: Rgb = Rgb(40, 40, 40);
const MARGIN: i64 = 24;

/// Grouped bar plot; each series is drawn side by side per position.
pub fn bar_plot(series: &[(Vec<f64>, Rgb)], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, BACKGROUND);
    let (w, h) = (width as i64, height as i64);
    let n = series.iter().map(|(v, _)| v.len()).max().unwrap_or(0);
    let top = series.iter().flat_map(|(v, _)| v.iter().cloned()).fold(0.0, f64::max);
    let plot_w = (w - 2 * MARGIN).max(1);
    let plot_h = (h - 2 * MARGIN).max(1);
    if n > 0 && top > 0.0 {
        let slot = plot_w as f64 / n as f64;
        let bar = slot / series.len() as f64;
        for (s, (vals, color)) in series.iter().enumerate() {
            for (i, v) in vals.iter().enumerate() {
                let x0 = MARGIN + (i as f64 * slot + s as f64 * bar) as i64;
                let x1 = (MARGIN + (i as f64 * slot + (s + 1) as f64 * bar) as i64 - 1).max(x0);
                let y = h - MARGIN - (v / top * plot_h as f64).round() as i64;
                img.fill_rect(x0, y, x1, h - MARGIN, *color);
            }
        }
    }
    img.line((MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    img.line((MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);
    img
}

/// Line plot of `(x, y)` series with `y` in `[0, 1]`. The x axis uses
/// `ln(1 + x)` so sweeps spanning several decades of `k` stay readable.
pub fn line_plot(series: &[(Vec<(f64, f64)>, Rgb)], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, BACKGROUND);
    let (w, h) = (width as i64, height as i64);
    let x_max = series
        .iter()
        .flat_map(|(pts, _)| pts.iter().map(|p| p.0.ln_1p()))
        .fold(0.0, f64::max)
        .max(1e-9);
    let plot_w = (w - 2 * MARGIN).max(1) as f64;
    let plot_h = (h - 2 * MARGIN).max(1) as f64;
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN + (x.ln_1p() / x_max * plot_w).round() as i64,
            h - MARGIN - (y.clamp(0.0, 1.0) * plot_h).round() as i64,
        )
    };
    // chance level
    let half = h - MARGIN - (0.5 * plot_h).round() as i64;
    for x in (MARGIN..w - MARGIN).step_by(4) {
        img.set(x, half, Rgb(180, 180, 180));
    }
    img.line((MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    img.line((MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);
    for (pts, color) in series {
        for pair in pts.windows(2) {
            img.line(to_px(pair[0]), to_px(pair[1]), *color);
        }
        for &p in pts {
            let (x, y) = to_px(p);
            img.fill_rect(x - 1, y - 1, x + 1, y + 1, *color);
        }
    }
    img
}
