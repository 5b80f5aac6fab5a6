//! Noise-model calibration from flat-field and dark-frame stacks.
//!
//! Three steps: (1) per-block mean/variance statistics of flat stacks and an
//! OLS fit of variance against mean whose slope is the system gain, with
//! points above quarter saturation excluded as clipped; (2) dark-frame
//! temporal mean for the fixed pattern and pooled residual variance for the
//! read noise; (3) OLS lines across ISO levels for the camera-level model.
//!
//! All statistics use the unbiased (n-1) variance, and all fits run in
//! normalized units.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::noise::{sample_noise, IsoNoiseParams, NoiseMode, NoiseModelParams};
use crate::raw::{self, ImagePlane, RawImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackKind {
    Flat,
    Dark,
}

/// A stack of frames captured under identical settings.
#[derive(Debug, Clone)]
pub struct FrameStack {
    pub frames: Vec<RawImage>,
    pub kind: StackKind,
}

impl FrameStack {
    pub fn new(frames: Vec<RawImage>, kind: StackKind) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "a frame stack needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let first = &frames[0];
        for f in &frames[1..] {
            if f.width != first.width || f.height != first.height {
                return Err(Error::Validation("mixed frame dimensions in stack".into()));
            }
            if f.iso != first.iso
                || f.exposure_s != first.exposure_s
                || f.black_level != first.black_level
                || f.white_level != first.white_level
            {
                return Err(Error::Validation("mixed metadata in stack".into()));
            }
        }
        Ok(Self { frames, kind })
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn iso(&self) -> f64 {
        self.frames[0].iso as f64
    }
}

/// One mean-variance sample from a flat-field block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanVarPoint {
    pub mean: f64,
    pub variance: f64,
    pub block_id: usize,
}

/// Mean and unbiased variance over all pixels x frames of each grid block,
/// in normalized units. Remainder pixels past the grid are dropped from the
/// trailing edge.
pub fn block_statistics(stack: &FrameStack, rows: usize, cols: usize) -> Result<Vec<MeanVarPoint>> {
    if stack.kind != StackKind::Flat {
        return Err(Error::Validation("block_statistics expects a flat stack".into()));
    }
    let (w, h) = (stack.width(), stack.height());
    if rows == 0 || cols == 0 || rows > h || cols > w {
        return Err(Error::Validation(format!(
            "block grid {rows}x{cols} does not fit a {h}x{w} frame"
        )));
    }
    let bh = h / rows;
    let bw = w / cols;
    let planes: Vec<ImagePlane> =
        stack.frames.iter().map(|f| f.normalize()).collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(rows * cols);
    for br in 0..rows {
        for bc in 0..cols {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut n = 0usize;
            for plane in &planes {
                for y in br * bh..(br + 1) * bh {
                    for x in bc * bw..(bc + 1) * bw {
                        let v = plane.data[y * w + x];
                        sum += v;
                        sum_sq += v * v;
                        n += 1;
                    }
                }
            }
            let mean = sum / n as f64;
            let variance = ((sum_sq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0);
            points.push(MeanVarPoint { mean, variance, block_id: br * cols + bc });
        }
    }
    Ok(points)
}

fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::RankDeficient("all abscissae identical".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// OLS of block variance against block mean. Points with mean beyond a
/// quarter of the saturation level are excluded as clipped. Returns
/// `(k, intercept)`; the intercept absorbs the signal-independent variance.
pub fn fit_gain(points: &[MeanVarPoint], saturation: f64) -> Result<(f64, f64)> {
    let surviving: Vec<&MeanVarPoint> =
        points.iter().filter(|p| p.mean <= saturation / 4.0).collect();
    if surviving.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "only {} mean-variance points survive the quarter-saturation cut",
            surviving.len()
        )));
    }
    let xs: Vec<f64> = surviving.iter().map(|p| p.mean).collect();
    let ys: Vec<f64> = surviving.iter().map(|p| p.variance).collect();
    ols(&xs, &ys)
}

/// Per-pixel temporal mean of a dark stack, in normalized units.
pub fn fit_fixed_pattern(dark: &FrameStack) -> Result<ImagePlane> {
    if dark.kind != StackKind::Dark {
        return Err(Error::Validation("fit_fixed_pattern expects a dark stack".into()));
    }
    let (w, h) = (dark.width(), dark.height());
    let mut acc = vec![0.0f64; w * h];
    for frame in &dark.frames {
        let plane = frame.normalize()?;
        for (a, v) in acc.iter_mut().zip(&plane.data) {
            *a += v;
        }
    }
    let n = dark.frames.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    ImagePlane::new(w, h, acc)
}

/// Pooled unbiased standard deviation of `frame - n_fp` residuals over all
/// pixels and frames.
pub fn fit_read_sigma(dark: &FrameStack, n_fp: &ImagePlane) -> Result<f64> {
    let (w, h) = (dark.width(), dark.height());
    if n_fp.width != w || n_fp.height != h {
        return Err(Error::Validation("fixed-pattern map does not match dark frames".into()));
    }
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut n = 0usize;
    for frame in &dark.frames {
        let plane = frame.normalize()?;
        for (v, fp) in plane.data.iter().zip(&n_fp.data) {
            let r = v - fp;
            sum += r;
            sum_sq += r * r;
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::InsufficientData("need at least 2 residual samples".into()));
    }
    let var = ((sum_sq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0);
    Ok(var.sqrt())
}

/// Per-ISO estimates feeding the camera-level fit.
#[derive(Debug, Clone)]
pub struct IsoCalibrationSample {
    pub iso: f64,
    pub k: f64,
    pub sigma_read: f64,
    pub n_fp: ImagePlane,
}

/// Fit the ISO lines: OLS of `k` against ISO, of `ln sigma_read` against
/// `ln k`, and an independent per-pixel OLS of `n_fp` against ISO for the
/// two fixed-pattern maps.
pub fn fit_iso_model(samples: &[IsoCalibrationSample]) -> Result<NoiseModelParams> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 ISO samples, got {}",
            samples.len()
        )));
    }
    let isos: Vec<f64> = samples.iter().map(|s| s.iso).collect();
    let distinct = {
        let mut sorted = isos.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        sorted.len()
    };
    if distinct < 2 {
        return Err(Error::RankDeficient("all samples share one ISO value".into()));
    }
    let (w, h) = (samples[0].n_fp.width, samples[0].n_fp.height);
    for s in samples {
        if s.n_fp.width != w || s.n_fp.height != h {
            return Err(Error::Validation("fixed-pattern maps differ in shape across ISOs".into()));
        }
        if !(s.k > 0.0) || !(s.sigma_read > 0.0) {
            return Err(Error::Domain(format!(
                "log fit requires positive k and sigma_read, got k={} sigma_read={} at iso {}",
                s.k, s.sigma_read, s.iso
            )));
        }
    }

    let ks: Vec<f64> = samples.iter().map(|s| s.k).collect();
    let (a_k, b_k) = ols(&isos, &ks)?;

    let ln_k: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    let ln_sigma: Vec<f64> = samples.iter().map(|s| s.sigma_read.ln()).collect();
    let (a_read, b_read) = ols(&ln_k, &ln_sigma)?;

    // per-pixel slope/intercept of n_fp against iso
    let n = samples.len() as f64;
    let mean_iso = isos.iter().sum::<f64>() / n;
    let sxx: f64 = isos.iter().map(|&x| (x - mean_iso) * (x - mean_iso)).sum();
    if sxx == 0.0 {
        return Err(Error::RankDeficient("per-pixel fit has identical ISOs".into()));
    }
    let mut slope = vec![0.0f64; w * h];
    let mut intercept = vec![0.0f64; w * h];
    for i in 0..w * h {
        let mean_fp = samples.iter().map(|s| s.n_fp.data[i]).sum::<f64>() / n;
        let sxy: f64 = samples
            .iter()
            .map(|s| (s.iso - mean_iso) * (s.n_fp.data[i] - mean_fp))
            .sum();
        let sl = sxy / sxx;
        slope[i] = sl;
        intercept[i] = mean_fp - sl * mean_iso;
    }

    let iso_min = isos.iter().cloned().fold(f64::INFINITY, f64::min);
    let iso_max = isos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(NoiseModelParams {
        a_k,
        b_k,
        a_read,
        b_read,
        iso_min,
        iso_max,
        n_fp_k: ImagePlane::new(w, h, slope)?,
        n_fp_b: ImagePlane::new(w, h, intercept)?,
    })
}

// ---------------------------------------------------------------------------
// Manifest-driven pipeline (CLI `calibrate`)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackEntry {
    pub iso: f64,
    pub exposure_s: f64,
    pub kind: StackKind,
    pub paths: Vec<String>,
}

/// JSON manifest listing RAWF frame stacks grouped by (iso, exposure, kind).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationManifest {
    pub block_rows: usize,
    pub block_cols: usize,
    /// Saturation level in normalized units; the white level maps to 1.0.
    #[serde(default = "default_saturation")]
    pub saturation: f64,
    pub stacks: Vec<StackEntry>,
}

fn default_saturation() -> f64 {
    1.0
}

fn load_stack(entry: &StackEntry, base: &Path) -> Result<FrameStack> {
    let frames = entry
        .paths
        .iter()
        .map(|p| raw::load_raw(base.join(p)))
        .collect::<Result<Vec<_>>>()?;
    FrameStack::new(frames, entry.kind)
}

/// Run the full three-step calibration over a manifest. Paths resolve
/// relative to `base_dir`. Flat points from all exposures at one ISO pool
/// into a single gain regression.
pub fn run_calibration(manifest: &CalibrationManifest, base_dir: &Path) -> Result<NoiseModelParams> {
    let mut isos: Vec<f64> = manifest.stacks.iter().map(|s| s.iso).collect();
    isos.sort_by(f64::total_cmp);
    isos.dedup();

    let mut samples = Vec::new();
    for &iso in &isos {
        let mut points = Vec::new();
        for entry in manifest.stacks.iter().filter(|s| s.iso == iso && s.kind == StackKind::Flat) {
            let stack = load_stack(entry, base_dir)?;
            points.extend(block_statistics(&stack, manifest.block_rows, manifest.block_cols)?);
        }
        if points.is_empty() {
            return Err(Error::InsufficientData(format!("no flat stacks at iso {iso}")));
        }
        let (k, _intercept) = fit_gain(&points, manifest.saturation)?;

        let dark_entries: Vec<&StackEntry> = manifest
            .stacks
            .iter()
            .filter(|s| s.iso == iso && s.kind == StackKind::Dark)
            .collect();
        if dark_entries.len() != 1 {
            return Err(Error::Validation(format!(
                "expected exactly one dark stack at iso {iso}, got {}",
                dark_entries.len()
            )));
        }
        let dark = load_stack(dark_entries[0], base_dir)?;
        let n_fp = fit_fixed_pattern(&dark)?;
        let sigma_read = fit_read_sigma(&dark, &n_fp)?;
        samples.push(IsoCalibrationSample { iso, k, sigma_read, n_fp });
    }
    fit_iso_model(&samples)
}

// ---------------------------------------------------------------------------
// Synthetic capture (tests and the CLI stack generator)
// ---------------------------------------------------------------------------

/// Synthesize one stack of frames for a clean normalized pattern under the
/// given per-ISO noise parameters. When `clip` is set, DN values clamp to
/// `[0, white_level]`, mimicking sensor saturation.
pub fn synth_stack(
    pattern: &ImagePlane,
    params: &IsoNoiseParams,
    frames: usize,
    seed: u64,
    black_level: f32,
    white_level: f32,
    exposure_s: f32,
    kind: StackKind,
    mode: NoiseMode,
    clip: bool,
) -> Result<FrameStack> {
    let range = (white_level - black_level) as f64;
    let mut out = Vec::with_capacity(frames);
    for fi in 0..frames {
        let noise = sample_noise(pattern, params, seed.wrapping_add(fi as u64), mode)?;
        let data: Vec<f32> = pattern
            .data
            .iter()
            .zip(&noise.data)
            .map(|(&x, &n)| {
                let dn = black_level as f64 + (x + n) * range;
                let dn = if clip { dn.clamp(0.0, white_level as f64) } else { dn };
                dn as f32
            })
            .collect();
        out.push(RawImage::new(
            pattern.width,
            pattern.height,
            data,
            black_level,
            white_level,
            params.iso as f32,
            exposure_s,
        )?);
    }
    FrameStack::new(out, kind)
}

/// Piecewise-constant flat-field pattern over a block grid, spanning
/// `[lo, hi]` in normalized units.
pub fn block_pattern(width: usize, height: usize, rows: usize, cols: usize, lo: f64, hi: f64) -> ImagePlane {
    let bh = height / rows;
    let bw = width / cols;
    let blocks = (rows * cols) as f64;
    let mut data = vec![lo; width * height];
    for y in 0..height {
        for x in 0..width {
            let br = (y / bh).min(rows - 1);
            let bc = (x / bw).min(cols - 1);
            let t = (br * cols + bc) as f64 / (blocks - 1.0).max(1.0);
            data[y * width + x] = lo + t * (hi - lo);
        }
    }
    ImagePlane { width, height, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::IsoNoiseParams;

    fn constant_stack(v: f32, frames: usize, kind: StackKind) -> FrameStack {
        let imgs = (0..frames)
            .map(|_| RawImage::new(8, 8, vec![v; 64], 64.0, 1088.0, 400.0, 0.01).unwrap())
            .collect();
        FrameStack::new(imgs, kind).unwrap()
    }

    #[test]
    fn stack_requires_two_homogeneous_frames() {
        let one = vec![RawImage::new(2, 2, vec![1.0; 4], 0.0, 10.0, 100.0, 0.1).unwrap()];
        assert!(matches!(FrameStack::new(one, StackKind::Dark), Err(Error::InsufficientData(_))));
        let mixed = vec![
            RawImage::new(2, 2, vec![1.0; 4], 0.0, 10.0, 100.0, 0.1).unwrap(),
            RawImage::new(2, 2, vec![1.0; 4], 0.0, 10.0, 200.0, 0.1).unwrap(),
        ];
        assert!(matches!(FrameStack::new(mixed, StackKind::Dark), Err(Error::Validation(_))));
    }

    #[test]
    fn block_statistics_constant_stack() {
        let stack = constant_stack(576.0, 5, StackKind::Flat);
        let pts = block_statistics(&stack, 2, 2).unwrap();
        assert_eq!(pts.len(), 4);
        for p in pts {
            assert!((p.mean - 0.5).abs() < 1e-12); // (576-64)/1024
            assert_eq!(p.variance, 0.0);
        }
    }

    #[test]
    fn block_statistics_two_disjoint_blocks() {
        // left half one value, right half another, 1x2 grid
        let mut data = vec![0.0f32; 64];
        for y in 0..8 {
            for x in 0..8 {
                data[y * 8 + x] = if x < 4 { 164.0 } else { 364.0 };
            }
        }
        let frames = (0..3)
            .map(|_| RawImage::new(8, 8, data.clone(), 64.0, 1088.0, 100.0, 0.01).unwrap())
            .collect();
        let stack = FrameStack::new(frames, StackKind::Flat).unwrap();
        let pts = block_statistics(&stack, 1, 2).unwrap();
        assert_eq!(pts.len(), 2);
        assert!((pts[0].mean - 100.0 / 1024.0).abs() < 1e-9);
        assert!((pts[1].mean - 300.0 / 1024.0).abs() < 1e-9);
        assert_eq!(pts[0].variance, 0.0);
        assert_eq!(pts[1].variance, 0.0);
    }

    #[test]
    fn block_statistics_rejects_oversized_grid() {
        let stack = constant_stack(100.0, 2, StackKind::Flat);
        assert!(matches!(block_statistics(&stack, 16, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn block_statistics_recovers_hg_variance() {
        // 25 frames, 2x2 grid of 32x32-pixel blocks
        let (k, sigma_read) = (3e-4, 5e-4);
        let pattern = block_pattern(64, 64, 2, 2, 0.05, 0.2);
        let params = IsoNoiseParams::uniform(64, 64, k, sigma_read, 0.0, 800.0);
        let stack = synth_stack(&pattern, &params, 25, 500, 64.0, 1088.0, 0.01, StackKind::Flat, NoiseMode::Hg, false)
            .unwrap();
        let pts = block_statistics(&stack, 2, 2).unwrap();
        for p in pts {
            let expect = sigma_read * sigma_read + p.mean * k;
            assert!(
                (p.variance - expect).abs() / expect < 0.05,
                "block {} variance {} vs {}",
                p.block_id,
                p.variance,
                expect
            );
        }
    }

    #[test]
    fn fit_gain_exact_line() {
        let pts: Vec<MeanVarPoint> = (0..6)
            .map(|i| {
                let mean = 0.01 + 0.03 * i as f64;
                MeanVarPoint { mean, variance: 0.01 * mean + 0.0004, block_id: i }
            })
            .collect();
        let (k, c) = fit_gain(&pts, 1.0).unwrap();
        assert!((k - 0.01).abs() < 1e-12);
        assert!((c - 0.0004).abs() < 1e-12);
    }

    #[test]
    fn fit_gain_excludes_quarter_saturation() {
        // a wildly off-line point above saturation/4 must not affect the fit
        let mut pts: Vec<MeanVarPoint> = (0..5)
            .map(|i| {
                let mean = 0.02 + 0.04 * i as f64;
                MeanVarPoint { mean, variance: 0.02 * mean, block_id: i }
            })
            .collect();
        pts.push(MeanVarPoint { mean: 0.5, variance: 1e-9, block_id: 99 });
        let (k, _) = fit_gain(&pts, 1.0).unwrap();
        assert!((k - 0.02).abs() < 1e-12, "clipped point leaked into the fit: k={k}");
    }

    #[test]
    fn fit_gain_insufficient_and_rank_deficient() {
        let pts = vec![MeanVarPoint { mean: 0.5, variance: 0.1, block_id: 0 }];
        assert!(matches!(fit_gain(&pts, 1.0), Err(Error::InsufficientData(_))));
        let same = vec![
            MeanVarPoint { mean: 0.1, variance: 0.1, block_id: 0 },
            MeanVarPoint { mean: 0.1, variance: 0.2, block_id: 1 },
        ];
        assert!(matches!(fit_gain(&same, 1.0), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn fit_gain_recovers_synthetic_dn_gain() {
        // k = 0.25 DN/e- on a 1024-DN range sensor, 3 exposures x 24 blocks x 25 frames
        let k_dn = 0.25;
        let range = 1024.0;
        let k_norm = k_dn / range;
        let sigma_read = 2.0 / range;
        let mut points = Vec::new();
        for (ei, scale) in [0.4, 0.7, 1.0].iter().enumerate() {
            let pattern = block_pattern(48, 64, 4, 6, 0.02 * scale, 0.24 * scale);
            let params = IsoNoiseParams::uniform(48, 64, k_norm, sigma_read, 0.0, 1600.0);
            let stack = synth_stack(
                &pattern,
                &params,
                25,
                900 + ei as u64,
                64.0,
                64.0 + range as f32,
                0.01 * *scale as f32,
                StackKind::Flat,
                NoiseMode::Poisson,
                false,
            )
            .unwrap();
            points.extend(block_statistics(&stack, 4, 6).unwrap());
        }
        let (k_fit, _) = fit_gain(&points, 1.0).unwrap();
        assert!((k_fit - k_norm).abs() / k_norm < 0.02, "k {k_fit} vs {k_norm}");
    }

    #[test]
    fn fixed_pattern_noiseless_and_insufficient() {
        let stack = constant_stack(164.0, 4, StackKind::Dark);
        let fp = fit_fixed_pattern(&stack).unwrap();
        assert!(fp.data.iter().all(|&v| (v - 100.0 / 1024.0).abs() < 1e-9));
        // single frame is rejected at stack construction already
        let one = vec![RawImage::new(2, 2, vec![1.0; 4], 0.0, 10.0, 100.0, 0.1).unwrap()];
        assert!(FrameStack::new(one, StackKind::Dark).is_err());
    }

    #[test]
    fn fixed_pattern_recovered_within_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(13);
        let (w, h) = (64, 64);
        let sigma_read = 0.02;
        let fp_truth =
            ImagePlane::new(w, h, (0..w * h).map(|_| rng.gen_range(-0.01..0.01)).collect()).unwrap();
        let params = IsoNoiseParams { k: 1e-4, sigma_read, n_fp: fp_truth.clone(), iso: 800.0 };
        let zeros = ImagePlane::zeros(w, h);
        let stack = synth_stack(&zeros, &params, 100, 77, 64.0, 1088.0, 0.01, StackKind::Dark, NoiseMode::Hg, false)
            .unwrap();
        let fp_hat = fit_fixed_pattern(&stack).unwrap();
        let bound = 4.0 * sigma_read / (100f64).sqrt();
        let bad = fp_hat
            .data
            .iter()
            .zip(&fp_truth.data)
            .filter(|(a, b)| (*a - *b).abs() > bound)
            .count();
        // 4-sigma bound: essentially every pixel must fall inside
        assert!(
            (bad as f64) / (w * h) as f64 <= 1e-4,
            "{bad} of {} pixels outside the 4 sigma/sqrt(frames) bound",
            w * h
        );
    }

    #[test]
    fn read_sigma_cases() {
        // zero residuals
        let stack = constant_stack(164.0, 4, StackKind::Dark);
        let fp = fit_fixed_pattern(&stack).unwrap();
        assert_eq!(fit_read_sigma(&stack, &fp).unwrap(), 0.0);

        // alternating +-c residuals around zero fixed pattern
        let c = 10.0f32;
        let frames: Vec<RawImage> = (0..2)
            .map(|fi| {
                let data: Vec<f32> = (0..64)
                    .map(|i| {
                        let sign = if (i + fi) % 2 == 0 { 1.0 } else { -1.0 };
                        64.0 + sign * c
                    })
                    .collect();
                RawImage::new(8, 8, data, 64.0, 1088.0, 100.0, 0.01).unwrap()
            })
            .collect();
        let stack2 = FrameStack::new(frames, StackKind::Dark).unwrap();
        let zero_fp = ImagePlane::zeros(8, 8);
        let got = fit_read_sigma(&stack2, &zero_fp).unwrap();
        let expect = (10.0 / 1024.0) * (128.0f64 / 127.0).sqrt();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn read_sigma_monte_carlo() {
        let (w, h) = (64, 64);
        let sigma_read = 0.02;
        let params = IsoNoiseParams::uniform(w, h, 1e-4, sigma_read, 0.0, 800.0);
        let zeros = ImagePlane::zeros(w, h);
        let stack = synth_stack(&zeros, &params, 100, 3, 64.0, 1088.0, 0.01, StackKind::Dark, NoiseMode::Hg, false)
            .unwrap();
        let fp = fit_fixed_pattern(&stack).unwrap();
        let got = fit_read_sigma(&stack, &fp).unwrap();
        assert!((got - sigma_read).abs() / sigma_read < 0.05, "{got}");
    }

    #[test]
    fn iso_model_exact_line() {
        let map = ImagePlane::zeros(2, 2);
        let samples = vec![
            IsoCalibrationSample { iso: 100.0, k: 0.1, sigma_read: 0.1, n_fp: map.clone() },
            IsoCalibrationSample { iso: 200.0, k: 0.2, sigma_read: 0.2, n_fp: map.clone() },
        ];
        let m = fit_iso_model(&samples).unwrap();
        assert!((m.a_k - 0.001).abs() < 1e-12);
        assert!(m.b_k.abs() < 1e-12);
    }

    #[test]
    fn iso_model_constant_fp_maps() {
        let map = ImagePlane::constant(3, 3, 0.007);
        let samples = vec![
            IsoCalibrationSample { iso: 100.0, k: 0.1, sigma_read: 0.05, n_fp: map.clone() },
            IsoCalibrationSample { iso: 400.0, k: 0.4, sigma_read: 0.11, n_fp: map.clone() },
            IsoCalibrationSample { iso: 1600.0, k: 1.6, sigma_read: 0.33, n_fp: map.clone() },
        ];
        let m = fit_iso_model(&samples).unwrap();
        assert!(m.n_fp_k.data.iter().all(|v| v.abs() < 1e-15));
        assert!(m.n_fp_b.data.iter().all(|v| (v - 0.007).abs() < 1e-12));
    }

    #[test]
    fn iso_model_errors() {
        let map = ImagePlane::zeros(2, 2);
        let dup = vec![
            IsoCalibrationSample { iso: 100.0, k: 0.1, sigma_read: 0.1, n_fp: map.clone() },
            IsoCalibrationSample { iso: 100.0, k: 0.2, sigma_read: 0.2, n_fp: map.clone() },
        ];
        assert!(matches!(fit_iso_model(&dup), Err(Error::RankDeficient(_))));
        let bad = vec![
            IsoCalibrationSample { iso: 100.0, k: -0.1, sigma_read: 0.1, n_fp: map.clone() },
            IsoCalibrationSample { iso: 200.0, k: 0.2, sigma_read: 0.2, n_fp: map.clone() },
        ];
        assert!(matches!(fit_iso_model(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn estimates_are_frame_order_invariant() {
        let (w, h) = (16, 16);
        let params = IsoNoiseParams::uniform(w, h, 2e-4, 0.01, 0.0, 800.0);
        let zeros = ImagePlane::zeros(w, h);
        let stack = synth_stack(&zeros, &params, 8, 11, 64.0, 1088.0, 0.01, StackKind::Dark, NoiseMode::Hg, false)
            .unwrap();
        let mut rev = stack.frames.clone();
        rev.reverse();
        let stack_rev = FrameStack::new(rev, StackKind::Dark).unwrap();
        let a = fit_fixed_pattern(&stack).unwrap();
        let b = fit_fixed_pattern(&stack_rev).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-15);
        }
        let sa = fit_read_sigma(&stack, &a).unwrap();
        let sb = fit_read_sigma(&stack_rev, &a).unwrap();
        assert!((sa - sb).abs() < 1e-15);
    }
}
