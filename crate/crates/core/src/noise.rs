//! Physically-modeled sensor noise: sampling and likelihood evaluation.
//!
//! The model decomposes noise into shot noise (Poisson in the photoelectron
//! count), read noise (zero-mean Gaussian) and a deterministic per-pixel
//! fixed-pattern offset. Shot + read collapse into a heteroscedastic Gaussian
//! with variance `sigma_read^2 + signal * k`.
//!
//! All quantities live in normalized linear units (post black-level
//! subtraction, divided by `white - black`). Natural logarithms are used
//! throughout, both for the `sigma_read` vs `k` line and for the NLL.

use rand::RngCore;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raw::{self, ImagePlane, RawImage};

/// Counter-based deterministic generator: a SplitMix64 stream whose starting
/// state is a hash of an arbitrary key. Sampling keyed by (seed, stream,
/// pixel) is reproducible and order-independent under parallel generation.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn from_key(parts: &[u64]) -> Self {
        let mut h = 0x9E37_79B9_7F4A_7C15u64;
        for &p in parts {
            h = mix64(h.wrapping_mul(0x100_0000_01B3).wrapping_add(p));
        }
        Self { state: h }
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        let mut i = 0;
        while i < dest.len() {
            let chunk = self.next_u64().to_le_bytes();
            let n = (dest.len() - i).min(8);
            dest[i..i + n].copy_from_slice(&chunk[..n]);
            i += n;
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

const STREAM_SHOT: u64 = 0x5348;
const STREAM_READ: u64 = 0x5244;
const STREAM_HG: u64 = 0x4847;

/// Camera-level calibration: the ISO lines for gain and read noise plus the
/// two per-pixel fixed-pattern maps.
#[derive(Debug, Clone)]
pub struct NoiseModelParams {
    /// Gain line `k = a_k * iso + b_k` (normalized units per ISO).
    pub a_k: f64,
    pub b_k: f64,
    /// Read-noise line `ln(sigma_read) = a_read * ln(k) + b_read`.
    pub a_read: f64,
    pub b_read: f64,
    /// Declared operating range for ISO.
    pub iso_min: f64,
    pub iso_max: f64,
    /// Fixed-pattern slope map: `n_fp = iso * n_fp_k + n_fp_b`, per pixel.
    pub n_fp_k: ImagePlane,
    pub n_fp_b: ImagePlane,
}

impl NoiseModelParams {
    /// Check the declared invariants: positive gain across the ISO range and
    /// matching map dimensions.
    pub fn validate(&self) -> Result<()> {
        if !self.n_fp_k.same_shape(&self.n_fp_b) {
            return Err(Error::Validation("fixed-pattern maps differ in shape".into()));
        }
        if !(self.iso_max >= self.iso_min) {
            return Err(Error::Validation("iso_max must be >= iso_min".into()));
        }
        // k is linear in iso, so positivity at both endpoints covers the range
        for iso in [self.iso_min, self.iso_max] {
            let k = self.a_k * iso + self.b_k;
            if !(k > 0.0) {
                return Err(Error::ModelRange(format!("derived k = {k} at iso {iso} is not positive")));
            }
        }
        Ok(())
    }

    /// Evaluate the per-ISO parameters.
    ///
    /// `k = a_k * iso + b_k`, `sigma_read = exp(a_read * ln k + b_read)`,
    /// `n_fp = iso * n_fp_k + n_fp_b`, all with natural logarithms.
    pub fn at_iso(&self, iso: f64) -> Result<IsoNoiseParams> {
        if !(iso >= self.iso_min && iso <= self.iso_max) {
            return Err(Error::ModelRange(format!(
                "iso {iso} outside declared range [{}, {}]",
                self.iso_min, self.iso_max
            )));
        }
        let k = self.a_k * iso + self.b_k;
        if !(k > 0.0) {
            return Err(Error::ModelRange(format!("derived k = {k} at iso {iso} is not positive")));
        }
        let sigma_read = (self.a_read * k.ln() + self.b_read).exp();
        let n_fp = self
            .n_fp_k
            .zip(&self.n_fp_b, |slope, bias| iso * slope + bias)?;
        Ok(IsoNoiseParams { k, sigma_read, n_fp, iso })
    }
}

/// Noise parameters evaluated at one ISO, in normalized units.
#[derive(Debug, Clone)]
pub struct IsoNoiseParams {
    /// System gain: shot-noise variance per unit of signal.
    pub k: f64,
    pub sigma_read: f64,
    /// Deterministic per-pixel fixed-pattern offset.
    pub n_fp: ImagePlane,
    pub iso: f64,
}

impl IsoNoiseParams {
    /// Uniform parameters with a constant fixed-pattern level; test helper.
    pub fn uniform(width: usize, height: usize, k: f64, sigma_read: f64, n_fp: f64, iso: f64) -> Self {
        Self { k, sigma_read, n_fp: ImagePlane::constant(width, height, n_fp), iso }
    }
}

/// Per-pixel heteroscedastic standard deviation
/// `sqrt(sigma_read^2 + max(signal, 0) * k)`.
///
/// Negative rendered signal is clamped to zero inside the variance so the
/// model stays valid while the optimizer undershoots.
pub fn hg_sigma(signal: &ImagePlane, params: &IsoNoiseParams) -> ImagePlane {
    let var_read = params.sigma_read * params.sigma_read;
    signal.map(|s| (var_read + s.max(0.0) * params.k).sqrt())
}

/// Which generative route to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Exact Poisson photoelectron counts for the shot component.
    Poisson,
    /// Heteroscedastic Gaussian approximation of shot + read.
    Hg,
}

/// Draw one noise field `n = n_shot + n_read + n_fp` for the given clean
/// signal. Deterministic given `(seed, mode, dimensions)`; each pixel owns an
/// independent RNG stream so generation order never matters.
pub fn sample_noise(
    clean: &ImagePlane,
    params: &IsoNoiseParams,
    seed: u64,
    mode: NoiseMode,
) -> Result<ImagePlane> {
    if !clean.same_shape(&params.n_fp) {
        return Err(Error::Validation(format!(
            "clean {}x{} vs fp map {}x{}",
            clean.width, clean.height, params.n_fp.width, params.n_fp.height
        )));
    }
    if mode == NoiseMode::Poisson {
        if !(params.k > 0.0) {
            return Err(Error::Domain(format!("poisson mode requires k > 0, got {}", params.k)));
        }
        if let Some(v) = clean.data.iter().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("poisson mode requires clean >= 0, found {v}")));
        }
    }
    let width = clean.width;
    let data: Vec<f64> = (0..clean.height)
        .into_par_iter()
        .flat_map_iter(|y| {
            let clean = &clean;
            let params = &params;
            (0..width).map(move |x| {
                let idx = (y * width + x) as u64;
                let s = clean.data[y * width + x];
                let fp = params.n_fp.data[y * width + x];
                match mode {
                    NoiseMode::Hg => {
                        let sigma = (params.sigma_read * params.sigma_read
                            + s.max(0.0) * params.k)
                            .sqrt();
                        let mut rng = CounterRng::from_key(&[seed, STREAM_HG, idx]);
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sigma * z + fp
                    }
                    NoiseMode::Poisson => {
                        let lambda = s / params.k;
                        let shot = if lambda > 0.0 {
                            let mut rng = CounterRng::from_key(&[seed, STREAM_SHOT, idx]);
                            let count = Poisson::new(lambda)
                                .expect("lambda checked positive")
                                .sample(&mut rng);
                            count * params.k - s
                        } else {
                            0.0
                        };
                        let read = if params.sigma_read > 0.0 {
                            let mut rng = CounterRng::from_key(&[seed, STREAM_READ, idx]);
                            let z: f64 = StandardNormal.sample(&mut rng);
                            params.sigma_read * z
                        } else {
                            0.0
                        };
                        shot + read + fp
                    }
                }
            })
        })
        .collect();
    Ok(ImagePlane { width, height: clean.height, data })
}

/// Per-pixel negative log-likelihood of an estimated noise field under the
/// model `N(n_fp, sigma_hg^2)` with `sigma_hg` evaluated from `signal`.
/// Returns the per-pixel plane and its mean.
pub fn nll(
    n_hat: &ImagePlane,
    signal: &ImagePlane,
    params: &IsoNoiseParams,
) -> Result<(ImagePlane, f64)> {
    if !n_hat.same_shape(signal) || !n_hat.same_shape(&params.n_fp) {
        return Err(Error::Validation("nll shape mismatch".into()));
    }
    let sigma = hg_sigma(signal, params);
    let mut data = Vec::with_capacity(n_hat.data.len());
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for i in 0..n_hat.data.len() {
        let s = sigma.data[i];
        if s == 0.0 {
            return Err(Error::Singular(
                "sigma_hg = 0; ensure sigma_read > 0 before evaluating the NLL".into(),
            ));
        }
        let r = n_hat.data[i] - params.n_fp.data[i];
        data.push(0.5 * (ln_2pi + (s * s).ln()) + r * r / (2.0 * s * s));
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    Ok((ImagePlane { width: n_hat.width, height: n_hat.height, data }, mean))
}

/// Standardize an estimated noise field: `(n_hat - n_fp) / sigma_hg`.
pub fn normalize_noise(
    n_hat: &ImagePlane,
    signal: &ImagePlane,
    params: &IsoNoiseParams,
) -> Result<ImagePlane> {
    if !n_hat.same_shape(signal) || !n_hat.same_shape(&params.n_fp) {
        return Err(Error::Validation("normalize_noise shape mismatch".into()));
    }
    let sigma = hg_sigma(signal, params);
    if sigma.data.iter().any(|&s| s == 0.0) {
        return Err(Error::Singular("sigma_hg = 0 in normalize_noise".into()));
    }
    let mut data = Vec::with_capacity(n_hat.data.len());
    for i in 0..n_hat.data.len() {
        data.push((n_hat.data[i] - params.n_fp.data[i]) / sigma.data[i]);
    }
    Ok(ImagePlane { width: n_hat.width, height: n_hat.height, data })
}

#[derive(Serialize, Deserialize)]
struct NoiseModelParamsFile {
    a_k: f64,
    b_k: f64,
    a_read: f64,
    b_read: f64,
    iso_min: f64,
    iso_max: f64,
    width: usize,
    height: usize,
    /// Relative paths to the fixed-pattern map sidecar files.
    n_fp_k: String,
    n_fp_b: String,
}

fn map_to_raw(map: &ImagePlane) -> Result<RawImage> {
    // Sidecar maps use unit levels so normalize() is the identity.
    let data = map.data.iter().map(|&v| v as f32).collect();
    RawImage::new(map.width, map.height, data, 0.0, 1.0, 0.0, 0.0)
}

fn map_from_raw(img: &RawImage) -> ImagePlane {
    ImagePlane {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| v as f64).collect(),
    }
}

/// Write the calibration JSON plus the two fixed-pattern RAWF sidecars next
/// to it. Map values are rounded to `f32` by the sidecar format.
pub fn save_noise_params(params: &NoiseModelParams, json_path: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let json_path = json_path.as_ref();
    let stem = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "noise_params".into());
    let k_name = format!("{stem}.n_fp_k.rawf");
    let b_name = format!("{stem}.n_fp_b.rawf");
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    raw::save_raw(&map_to_raw(&params.n_fp_k)?, dir.join(&k_name))?;
    raw::save_raw(&map_to_raw(&params.n_fp_b)?, dir.join(&b_name))?;
    let file = NoiseModelParamsFile {
        a_k: params.a_k,
        b_k: params.b_k,
        a_read: params.a_read,
        b_read: params.b_read,
        iso_min: params.iso_min,
        iso_max: params.iso_max,
        width: params.n_fp_k.width,
        height: params.n_fp_k.height,
        n_fp_k: k_name,
        n_fp_b: b_name,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(json_path, text)?;
    Ok(())
}

/// Load calibration JSON, resolving sidecar paths relative to the JSON file.
pub fn load_noise_params(json_path: impl AsRef<Path>) -> Result<NoiseModelParams> {
    let json_path = json_path.as_ref();
    let text = std::fs::read_to_string(json_path)?;
    let file: NoiseModelParamsFile = serde_json::from_str(&text)?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let n_fp_k = map_from_raw(&raw::load_raw(dir.join(&file.n_fp_k))?);
    let n_fp_b = map_from_raw(&raw::load_raw(dir.join(&file.n_fp_b))?);
    if n_fp_k.width != file.width || n_fp_k.height != file.height {
        return Err(Error::Validation("sidecar map dimensions disagree with header".into()));
    }
    let params = NoiseModelParams {
        a_k: file.a_k,
        b_k: file.b_k,
        a_read: file.a_read,
        b_read: file.b_read,
        iso_min: file.iso_min,
        iso_max: file.iso_max,
        n_fp_k,
        n_fp_b,
    };
    params.validate()?;
    Ok(params)
}
