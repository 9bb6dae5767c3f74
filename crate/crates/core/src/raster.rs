//! Line-plot rendering of individual variates: min-max display scaling, a
//! fixed palette and an integer line rasterizer. Output is bit-exact.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Line color used by every variate when colorization is switched off.
pub const GRAY_LINE: [u8; 3] = [0, 0, 0];

/// Twelve hues 30 degrees apart at full saturation and value, rounded to bytes.
pub const PALETTE: [[u8; 3]; 12] = [
    [255, 0, 0],
    [255, 128, 0],
    [255, 255, 0],
    [128, 255, 0],
    [0, 255, 0],
    [0, 255, 128],
    [0, 255, 255],
    [0, 128, 255],
    [0, 0, 255],
    [128, 0, 255],
    [255, 0, 255],
    [255, 0, 128],
];

pub const PALETTE_NAMES: [&str; 12] = [
    "red", "orange", "yellow", "chartreuse", "green", "spring", "cyan", "azure", "blue", "violet", "magenta", "rose",
];

/// Color for variate `i`; with `colorize` off every variate is drawn in black.
pub fn variate_color(i: usize, colorize: bool) -> [u8; 3] {
    if colorize {
        PALETTE[i % PALETTE.len()]
    } else {
        GRAY_LINE
    }
}

pub fn color_name(i: usize, colorize: bool) -> &'static str {
    if colorize {
        PALETTE_NAMES[i % PALETTE.len()]
    } else {
        "black"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub height: usize,
    pub width: usize,
    pub stroke_width: usize,
    /// Off reproduces the colorization ablation: one line color for all variates.
    pub colorize: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            stroke_width: 2,
            colorize: true,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "canvas {}x{} is below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if self.stroke_width == 0 {
            return Err(Error::Config("stroke_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// RGB raster of one variate, row-major with channels last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariateImage {
    pub height: usize,
    pub width: usize,
    pub variate_index: usize,
    pub color: [u8; 3],
    pub pixels: Vec<u8>,
    /// How many input values fell outside [0, 1] and were clamped.
    pub clamped: usize,
}

impl VariateImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Coordinates of all non-background pixels, in row-major order.
    pub fn ink(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.pixel(r, c) != BACKGROUND {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Split into non-overlapping `patch x patch` tiles scaled to [0, 1]:
    /// one row per tile (tiles row-major), `patch * patch * 3` features each.
    pub fn patches(&self, patch: usize) -> Result<DenseArray> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch {patch}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let feat = patch * patch * 3;
        let mut d = Vec::with_capacity(gh * gw * feat);
        for pr in 0..gh {
            for pc in 0..gw {
                for r in pr * patch..(pr + 1) * patch {
                    let o = (r * self.width + pc * patch) * 3;
                    d.extend(self.pixels[o..o + patch * 3].iter().map(|&b| b as f64 / 255.0));
                }
            }
        }
        DenseArray::matrix(gh * gw, feat, d)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_png(&mut buf)?;
        Ok(buf)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_png(BufWriter::new(file))
    }

    fn write_png<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))
    }
}

/// Min-max scale into [0, 1]; a constant input sits on the midline.
pub fn display_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / span).collect()
}

/// Integer line cells from `(r0, c0)` to `(r1, c1)`, both ends included.
pub fn bresenham(r0: i64, c0: i64, r1: i64, c1: i64) -> Vec<(i64, i64)> {
    let dc = (c1 - c0).abs();
    let dr = -(r1 - r0).abs();
    let sc = if c0 < c1 { 1 } else { -1 };
    let sr = if r0 < r1 { 1 } else { -1 };
    let (mut r, mut c, mut err) = (r0, c0, dc + dr);
    let mut out = Vec::with_capacity((dc - dr) as usize + 1);
    loop {
        out.push((r, c));
        if r == r1 && c == c1 {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dr {
            err += dr;
            c += sc;
        }
        if e2 <= dc {
            err += dc;
            r += sr;
        }
    }
}

/// Pixel row for a normalized value (larger values plot higher).
pub fn value_row(v: f64, height: usize) -> usize {
    ((1.0 - v) * (height - 1) as f64).round() as usize
}

pub fn time_col(t: usize, len: usize, width: usize) -> usize {
    ((t * (width - 1)) as f64 / (len - 1) as f64).round() as usize
}

pub fn render_variate(v_norm: &[f64], variate_index: usize, cfg: &RasterConfig) -> Result<VariateImage> {
    cfg.validate()?;
    if v_norm.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "rendering needs at least 2 points, got {}",
            v_norm.len()
        )));
    }
    let (h, w) = (cfg.height, cfg.width);
    let color = variate_color(variate_index, cfg.colorize);
    let mut clamped = 0;
    let points: Vec<(i64, i64)> = v_norm
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            let v = if v.is_nan() {
                clamped += 1;
                0.5
            } else if !(0.0..=1.0).contains(&v) {
                clamped += 1;
                v.clamp(0.0, 1.0)
            } else {
                v
            };
            (value_row(v, h) as i64, time_col(t, v_norm.len(), w) as i64)
        })
        .collect();

    let mut mask = vec![false; h * w];
    let lo = -((cfg.stroke_width as i64 - 1) / 2);
    let hi = cfg.stroke_width as i64 / 2;
    for seg in points.windows(2) {
        for (r, c) in bresenham(seg[0].0, seg[0].1, seg[1].0, seg[1].1) {
            for dr in lo..=hi {
                for dc in lo..=hi {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..h as i64).contains(&rr) && (0..w as i64).contains(&cc) {
                        mask[rr as usize * w + cc as usize] = true;
                    }
                }
            }
        }
    }
    let mut pixels = Vec::with_capacity(h * w * 3);
    for &m in &mask {
        pixels.extend_from_slice(if m { &color } else { &BACKGROUND });
    }
    Ok(VariateImage {
        height: h,
        width: w,
        variate_index,
        color,
        pixels,
        clamped,
    })
}

/// One image per column of a `T x N` lookback block, each display-normalized
/// over the full window.
pub fn render_sample(x: &DenseArray, cfg: &RasterConfig) -> Result<Vec<VariateImage>> {
    if x.shape().len() != 2 {
        return Err(Error::DimMismatch(format!("expected T x N, got {:?}", x.shape())));
    }
    let (t, n) = (x.rows(), x.cols());
    (0..n)
        .map(|v| {
            let col: Vec<f64> = (0..t).map(|i| x.get(i, v)).collect();
            render_variate(&display_normalize(&col), v, cfg)
        })
        .collect()
}
