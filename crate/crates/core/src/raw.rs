//! Raw-image container, the RAWF binary format, normalization and
//! image-domain metrics.
//!
//! A [`RawImage`] is a single-channel linear sensor frame in digital numbers
//! (DN) together with its black/white levels and capture metadata. The pixel
//! payload is kept as `f32` so that file round-trips are bit-exact; all
//! arithmetic downstream happens on [`ImagePlane`] in `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of the raw frame file format.
pub const RAWF_MAGIC: &[u8; 8] = b"RAWF0001";

/// Linear single-channel sensor frame with metadata, in digital numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Row-major samples, length `width * height`. Stored as `f32` so that
    /// save/load round-trips carry zero ULP drift.
    pub data: Vec<f32>,
    pub black_level: f32,
    pub white_level: f32,
    pub iso: f32,
    pub exposure_s: f32,
}

impl RawImage {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f32>,
        black_level: f32,
        white_level: f32,
        iso: f32,
        exposure_s: f32,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !(white_level > black_level) {
            return Err(Error::Validation(format!(
                "white_level {white_level} must exceed black_level {black_level}"
            )));
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::Validation("non-finite sample in raw data".into()));
            }
        }
        if !(black_level.is_finite() && white_level.is_finite() && iso.is_finite() && exposure_s.is_finite()) {
            return Err(Error::Validation("non-finite metadata field".into()));
        }
        Ok(Self { width, height, data, black_level, white_level, iso, exposure_s })
    }

    /// Map DN to the linear normalized domain: `(v - black) / (white - black)`.
    /// No clipping is applied; HDR values may exceed 1 and noise may go below 0.
    pub fn normalize(&self) -> Result<ImagePlane> {
        if !(self.white_level > self.black_level) {
            return Err(Error::Validation(format!(
                "white_level {} must exceed black_level {}",
                self.white_level, self.black_level
            )));
        }
        let black = self.black_level as f64;
        let range = (self.white_level - self.black_level) as f64;
        let data = self.data.iter().map(|&v| (v as f64 - black) / range).collect();
        Ok(ImagePlane { width: self.width, height: self.height, data: data })
    }
}

/// A real-valued image in normalized linear units. May exceed 1 (HDR) and go
/// negative (noise, residuals); always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::Validation("non-finite sample in image plane".into()));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Element-wise map into a new plane.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two same-shaped planes.
    pub fn zip(&self, other: &ImagePlane, f: impl Fn(f64, f64) -> f64) -> Result<ImagePlane> {
        if !self.same_shape(other) {
            return Err(Error::Validation(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(ImagePlane {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Convert back to digital numbers under the given levels.
    pub fn to_raw(&self, black_level: f32, white_level: f32, iso: f32, exposure_s: f32) -> Result<RawImage> {
        let range = (white_level - black_level) as f64;
        let data = self
            .data
            .iter()
            .map(|&v| (v * range + black_level as f64) as f32)
            .collect();
        RawImage::new(self.width, self.height, data, black_level, white_level, iso, exposure_s)
    }
}

fn read_u32_le(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn read_f32_le(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

const RAWF_HEADER_LEN: usize = 8 + 4 + 4 + 4 + 4 + 4 + 4;

/// Serialize a [`RawImage`] to the RAWF byte layout.
pub fn rawf_to_bytes(img: &RawImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAWF_HEADER_LEN + img.data.len() * 4);
    out.extend_from_slice(RAWF_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&img.black_level.to_le_bytes());
    out.extend_from_slice(&img.white_level.to_le_bytes());
    out.extend_from_slice(&img.iso.to_le_bytes());
    out.extend_from_slice(&img.exposure_s.to_le_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse the RAWF byte layout.
pub fn rawf_from_bytes(buf: &[u8]) -> Result<RawImage> {
    if buf.len() < RAWF_HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for RAWF header ({} bytes)",
            buf.len()
        )));
    }
    if &buf[0..8] != RAWF_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &buf[0..8],
            RAWF_MAGIC
        )));
    }
    let width = read_u32_le(buf, 8) as usize;
    let height = read_u32_le(buf, 12) as usize;
    let black_level = read_f32_le(buf, 16);
    let white_level = read_f32_le(buf, 20);
    let iso = read_f32_le(buf, 24);
    let exposure_s = read_f32_le(buf, 28);
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let actual = buf.len() - RAWF_HEADER_LEN;
    if actual != expected {
        return Err(Error::Length { expected, actual });
    }
    let mut data = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let v = read_f32_le(buf, RAWF_HEADER_LEN + 4 * i);
        if !v.is_finite() {
            return Err(Error::Validation(format!("non-finite sample at index {i}")));
        }
        data.push(v);
    }
    RawImage::new(width, height, data, black_level, white_level, iso, exposure_s)
}

pub fn save_raw(img: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes = rawf_to_bytes(img);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawImage> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    rawf_from_bytes(&buf)
}

/// Peak signal-to-noise ratio in dB. `peak` is the reference signal level
/// (1.0 for normalized-unit images). Identical images report `+inf`.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "psnr shape mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Validation(format!("psnr peak must be positive, got {peak}")));
    }
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Display tone curve: `clip(v * gain, 0, 1) ^ (1/2.2)`. Visualization only.
pub fn tone_map(img: &ImagePlane, gain: f64) -> Result<ImagePlane> {
    if !(gain > 0.0) {
        return Err(Error::Validation(format!("tone_map gain must be positive, got {gain}")));
    }
    Ok(img.map(|v| (v * gain).clamp(0.0, 1.0).powf(1.0 / 2.2)))
}

/// Write an 8-bit binary PGM (P5). Values are clamped to [0, 1].
pub fn save_pgm(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &v in &img.data {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Write an 8-bit grayscale PNG. Values are clamped to [0, 1].
pub fn save_png(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let pixels: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, pixels)
        .ok_or_else(|| Error::Validation("png buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(())
}
