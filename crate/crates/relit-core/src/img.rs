//! Float image container plus PNG / PFM file helpers.
//!
//! Pixel data is `f64` RGB in `[0, 1]`, row-major from the top-left.
//! The coverage plane records, per pixel, how much of the color came
//! from geometry rather than the render background (1 = fully covered).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{RelitError, Result};

/// HxWx3 image in `[0, 1]` plus a per-pixel coverage plane in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    coverage: Vec<f64>,
}

impl RasterImage {
    /// Solid-color image with zero coverage.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&[
                rgb[0].clamp(0.0, 1.0),
                rgb[1].clamp(0.0, 1.0),
                rgb[2].clamp(0.0, 1.0),
            ]);
        }
        Self {
            width,
            height,
            pixels,
            coverage: vec![0.0; width * height],
        }
    }

    /// Build from raw planes. Values are clamped to `[0, 1]`.
    pub fn from_planes(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        coverage: Vec<f64>,
    ) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(RelitError::DimensionMismatch(format!(
                "pixel plane has {} values, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        if coverage.len() != width * height {
            return Err(RelitError::DimensionMismatch(format!(
                "coverage plane has {} values, expected {}",
                coverage.len(),
                width * height
            )));
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let coverage = coverage.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            pixels,
            coverage,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Set one pixel, clamping each channel to `[0, 1]`.
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0].clamp(0.0, 1.0);
        self.pixels[i + 1] = rgb[1].clamp(0.0, 1.0);
        self.pixels[i + 2] = rgb[2].clamp(0.0, 1.0);
    }

    pub fn coverage_at(&self, x: usize, y: usize) -> f64 {
        self.coverage[y * self.width + x]
    }

    pub fn set_coverage(&mut self, x: usize, y: usize, c: f64) {
        self.coverage[y * self.width + x] = c.clamp(0.0, 1.0);
    }

    /// Flat RGB plane, row-major, 3 values per pixel.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn coverage(&self) -> &[f64] {
        &self.coverage
    }

    pub fn same_size(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Mean luma (channel average) over pixels selected by `mask`.
    pub fn masked_mean_luma(&self, mask: &PixelMask) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(x, y) {
                    let p = self.pixel(x, y);
                    sum += (p[0] + p[1] + p[2]) / 3.0;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Write an 8-bit PNG. Channel values map through `round(v * 255)`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for v in &self.pixels {
            buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("raw buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Read an 8-bit image file, mapping channels through `v / 255`.
    /// Coverage is set to 1 everywhere.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
            coverage: vec![1.0; w * h],
        })
    }

    /// Write a raw float dump in PFM format (color `PF`, little-endian).
    ///
    /// PFM stores rows bottom-up; this writer follows that convention so
    /// third-party viewers display the file upright.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                for c in p {
                    w.write_all(&(c as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a color PFM file written by [`RasterImage::save_pfm`].
    pub fn load_pfm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let parse = |line: String, what: &str| -> Result<String> {
            let t = line.trim().to_string();
            if t.is_empty() {
                Err(RelitError::Parse {
                    path: path.display().to_string(),
                    detail: format!("missing {what}"),
                })
            } else {
                Ok(t)
            }
        };
        let mut line = String::new();
        r.read_line(&mut line)?;
        let magic = parse(std::mem::take(&mut line), "magic")?;
        if magic != "PF" {
            return Err(RelitError::Parse {
                path: path.display().to_string(),
                detail: format!("expected PF magic, found {magic:?}"),
            });
        }
        r.read_line(&mut line)?;
        let dims = parse(std::mem::take(&mut line), "dimensions")?;
        let mut it = dims.split_whitespace();
        let width: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RelitError::Parse {
                path: path.display().to_string(),
                detail: "bad width".into(),
            })?;
        let height: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RelitError::Parse {
                path: path.display().to_string(),
                detail: "bad height".into(),
            })?;
        r.read_line(&mut line)?;
        let scale: f64 = parse(std::mem::take(&mut line), "scale")?
            .parse()
            .map_err(|_| RelitError::Parse {
                path: path.display().to_string(),
                detail: "bad scale".into(),
            })?;
        let little_endian = scale < 0.0;
        let mut raw = vec![0u8; width * height * 3 * 4];
        r.read_exact(&mut raw)?;
        let mut pixels = vec![0.0f64; width * height * 3];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let bytes: [u8; 4] = chunk.try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            // stored bottom-up
            let y = height - 1 - i / (width * 3);
            let rest = i % (width * 3);
            pixels[y * width * 3 + rest] = v as f64;
        }
        Self::from_planes(width, height, pixels, vec![1.0; width * height])
    }
}

/// Per-pixel boolean mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn new_filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(RelitError::DimensionMismatch(format!(
                "mask has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel scalar field (shading maps, sigma fields).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new_filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(RelitError::DimensionMismatch(format!(
                "scalar map has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}
