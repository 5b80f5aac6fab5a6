//! Radial/tangential lens distortion, Newton inversion, and the precomputed
//! resampling map that aligns rendered images with the distorted raw frames.
//!
//! The forward model maps undistorted normalized coordinates to distorted
//! ones. Raw frames live on the distorted grid, so the resampler stores, for
//! each raw-frame pixel, the undistorted source location obtained by Newton
//! inversion; building it once before training keeps the per-iteration cost
//! at a single bilinear gather.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::raw::ImagePlane;

pub const DEFAULT_NEWTON_TOL: f64 = 1e-10;
pub const DEFAULT_NEWTON_MAX_ITER: usize = 20;

/// Radial (k1..k4) and tangential (p1, p2) coefficients in normalized image
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistortionCoeffs {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub p1: f64,
    pub p2: f64,
}

impl DistortionCoeffs {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// Forward distortion of a normalized point (principal point at origin,
/// focal-length-divided).
pub fn distort_point(x: f64, y: f64, c: &DistortionCoeffs) -> (f64, f64) {
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * (c.k3 + r2 * c.k4)));
    let xd = x * radial + 2.0 * c.p1 * x * y + c.p2 * (r2 + 2.0 * x * x);
    let yd = y * radial + c.p1 * (r2 + 2.0 * y * y) + 2.0 * c.p2 * x * y;
    (xd, yd)
}

/// Analytic 2x2 Jacobian of the forward model at `(x, y)`.
pub fn distort_jacobian(x: f64, y: f64, c: &DistortionCoeffs) -> Matrix2<f64> {
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * (c.k3 + r2 * c.k4)));
    let dradial = c.k1 + r2 * (2.0 * c.k2 + r2 * (3.0 * c.k3 + r2 * 4.0 * c.k4));
    let dxd_dx = radial + 2.0 * x * x * dradial + 2.0 * c.p1 * y + 6.0 * c.p2 * x;
    let dxd_dy = 2.0 * x * y * dradial + 2.0 * c.p1 * x + 2.0 * c.p2 * y;
    let dyd_dx = 2.0 * x * y * dradial + 2.0 * c.p1 * x + 2.0 * c.p2 * y;
    let dyd_dy = radial + 2.0 * y * y * dradial + 6.0 * c.p1 * y + 2.0 * c.p2 * x;
    Matrix2::new(dxd_dx, dxd_dy, dyd_dx, dyd_dy)
}

/// Invert the forward model by Newton iteration, starting from the distorted
/// point itself. Returns `(x, y)` with forward residual below `tol` in the
/// max norm.
pub fn undistort_point(
    xd: f64,
    yd: f64,
    c: &DistortionCoeffs,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64)> {
    let target = Vector2::new(xd, yd);
    let mut p = target;
    for _ in 0..max_iter {
        let (fx, fy) = distort_point(p.x, p.y, c);
        let f = Vector2::new(fx, fy) - target;
        let residual = f.x.abs().max(f.y.abs());
        if residual < tol {
            return Ok((p.x, p.y));
        }
        let jac = distort_jacobian(p.x, p.y, c);
        let det = jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)];
        if det.abs() < 1e-14 || !det.is_finite() {
            return Err(Error::Singular(format!(
                "distortion Jacobian singular at ({:.4}, {:.4})",
                p.x, p.y
            )));
        }
        let step = jac.try_inverse().ok_or_else(|| {
            Error::Singular(format!("distortion Jacobian singular at ({:.4}, {:.4})", p.x, p.y))
        })? * f;
        p -= step;
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::Convergence { iterations: max_iter, residual });
        }
    }
    // final residual check after the last step
    let (fx, fy) = distort_point(p.x, p.y, c);
    let f = Vector2::new(fx, fy) - target;
    let residual = f.x.abs().max(f.y.abs());
    if residual < tol {
        Ok((p.x, p.y))
    } else {
        Err(Error::Convergence { iterations: max_iter, residual })
    }
}

/// Precomputed per-pixel resampling map. `source_*` hold continuous pixel
/// coordinates into the undistorted render; `mask` marks pixels whose source
/// is usable.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionMap {
    pub width: usize,
    pub height: usize,
    pub source_x: Vec<f64>,
    pub source_y: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DistortionMap {
    /// Identity map with a full mask (the zero-distortion fast path).
    pub fn identity(width: usize, height: usize) -> Self {
        let mut source_x = Vec::with_capacity(width * height);
        let mut source_y = Vec::with_capacity(width * height);
        for iy in 0..height {
            for ix in 0..width {
                source_x.push(ix as f64 + 0.5);
                source_y.push(iy as f64 + 0.5);
            }
        }
        Self { width, height, source_x, source_y, mask: vec![true; width * height] }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Build the resampling map for a camera: for every raw-frame pixel center,
/// Newton-invert the distortion to find its undistorted source location.
///
/// Pixels whose inversion does not converge (outside the image of the
/// forward map) are masked out, as are sources falling outside the frame by
/// more than half a pixel. A converged in-frame solution with non-positive
/// forward Jacobian determinant means the model is not injective over the
/// used domain and is reported as a validation error rather than silently
/// resampled.
pub fn build_distortion_map(cam: &CameraModel) -> Result<DistortionMap> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    if cam.distortion.is_zero() {
        return Ok(DistortionMap::identity(w, h));
    }
    let c = cam.distortion;
    let results: Vec<(f64, f64, u8)> = (0..h)
        .into_par_iter()
        .flat_map_iter(|iy| {
            let cam = &*cam;
            (0..w).map(move |ix| {
                let px = ix as f64 + 0.5;
                let py = iy as f64 + 0.5;
                let xd = (px - cam.cx) / cam.fx;
                let yd = (py - cam.cy) / cam.fy;
                match undistort_point(xd, yd, &c, DEFAULT_NEWTON_TOL, DEFAULT_NEWTON_MAX_ITER) {
                    Ok((x, y)) => {
                        let sx = x * cam.fx + cam.cx;
                        let sy = y * cam.fy + cam.cy;
                        let in_frame = sx >= -0.5
                            && sx <= w as f64 + 0.5
                            && sy >= -0.5
                            && sy <= h as f64 + 0.5;
                        if !in_frame {
                            (0.0, 0.0, 0)
                        } else {
                            let jac = distort_jacobian(x, y, &c);
                            let det = jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)];
                            if det <= 0.0 {
                                (x, y, 2) // injectivity violation inside the frame
                            } else {
                                (sx, sy, 1)
                            }
                        }
                    }
                    Err(_) => (0.0, 0.0, 0),
                }
            })
        })
        .collect();

    let mut map = DistortionMap {
        width: w,
        height: h,
        source_x: vec![0.0; w * h],
        source_y: vec![0.0; w * h],
        mask: vec![false; w * h],
    };
    for (i, (sx, sy, flag)) in results.into_iter().enumerate() {
        match flag {
            1 => {
                map.source_x[i] = sx;
                map.source_y[i] = sy;
                map.mask[i] = true;
            }
            2 => {
                return Err(Error::Validation(format!(
                    "distortion model is not injective over the frame (det <= 0 at pixel {i})"
                )));
            }
            _ => {}
        }
    }
    Ok(map)
}

#[inline]
fn bilinear_taps(sx: f64, sy: f64, w: usize, h: usize) -> ([usize; 4], [f64; 4]) {
    // pixel centers at integer + 0.5; stencil indices clamp at the border
    let u = sx - 0.5;
    let v = sy - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let clamp_x = |i: f64| (i.max(0.0) as usize).min(w - 1);
    let clamp_y = |i: f64| (i.max(0.0) as usize).min(h - 1);
    let x0i = clamp_x(x0);
    let x1i = clamp_x(x0 + 1.0);
    let y0i = clamp_y(y0);
    let y1i = clamp_y(y0 + 1.0);
    (
        [y0i * w + x0i, y0i * w + x1i, y1i * w + x0i, y1i * w + x1i],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

/// Bilinear-resample an image through the map. Masked pixels output zero and
/// are meant to be excluded by downstream losses via the mask.
pub fn apply_map(image: &ImagePlane, map: &DistortionMap) -> Result<ImagePlane> {
    if image.width != map.width || image.height != map.height {
        return Err(Error::Validation(format!(
            "apply_map: image {}x{} vs map {}x{}",
            image.width, image.height, map.width, map.height
        )));
    }
    let (w, h) = (map.width, map.height);
    let mut data = vec![0.0f64; w * h];
    for i in 0..w * h {
        if !map.mask[i] {
            continue;
        }
        let (taps, weights) = bilinear_taps(map.source_x[i], map.source_y[i], w, h);
        let mut acc = 0.0;
        for t in 0..4 {
            acc += weights[t] * image.data[taps[t]];
        }
        data[i] = acc;
    }
    Ok(ImagePlane { width: w, height: h, data })
}

/// Adjoint of [`apply_map`]: scatter output-pixel gradients back through the
/// four bilinear taps. The map itself is fixed.
pub fn apply_map_backward(d_output: &ImagePlane, map: &DistortionMap) -> Result<ImagePlane> {
    if d_output.width != map.width || d_output.height != map.height {
        return Err(Error::Validation("apply_map_backward shape mismatch".into()));
    }
    let (w, h) = (map.width, map.height);
    let mut data = vec![0.0f64; w * h];
    for i in 0..w * h {
        if !map.mask[i] {
            continue;
        }
        let g = d_output.data[i];
        if g == 0.0 {
            continue;
        }
        let (taps, weights) = bilinear_taps(map.source_x[i], map.source_y[i], w, h);
        for t in 0..4 {
            data[taps[t]] += weights[t] * g;
        }
    }
    Ok(ImagePlane { width: w, height: h, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};

    fn test_coeffs() -> DistortionCoeffs {
        DistortionCoeffs { k1: 0.12, k2: -0.03, k3: 0.0, k4: 0.0, p1: 0.004, p2: -0.006 }
    }

    #[test]
    fn distort_zero_coeffs_is_identity() {
        let c = DistortionCoeffs::default();
        let (x, y) = distort_point(0.37, -0.21, &c);
        assert_eq!((x, y), (0.37, -0.21));
    }

    #[test]
    fn distort_radial_only_value() {
        let c = DistortionCoeffs { k1: 0.1, ..Default::default() };
        let (x, y) = distort_point(0.1, 0.0, &c);
        assert!((x - 0.1001).abs() < 1e-15);
        assert_eq!(y, 0.0);
    }

    #[test]
    fn distort_tangential_only_value() {
        let c = DistortionCoeffs { p1: 0.01, ..Default::default() };
        let (x, y) = distort_point(0.0, 0.2, &c);
        assert_eq!(x, 0.0);
        assert!((y - 0.2012).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = test_coeffs();
        let h = 1e-6;
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rng.gen_range(-0.8..0.8);
            let y = rng.gen_range(-0.8..0.8);
            let jac = distort_jacobian(x, y, &c);
            let (xp, yp) = distort_point(x + h, y, &c);
            let (xm, ym) = distort_point(x - h, y, &c);
            assert!((jac[(0, 0)] - (xp - xm) / (2.0 * h)).abs() < 1e-7);
            assert!((jac[(1, 0)] - (yp - ym) / (2.0 * h)).abs() < 1e-7);
            let (xp2, yp2) = distort_point(x, y + h, &c);
            let (xm2, ym2) = distort_point(x, y - h, &c);
            assert!((jac[(0, 1)] - (xp2 - xm2) / (2.0 * h)).abs() < 1e-7);
            assert!((jac[(1, 1)] - (yp2 - ym2) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn undistort_zero_coeffs_returns_input() {
        let c = DistortionCoeffs::default();
        let (x, y) = undistort_point(0.4, -0.3, &c, 1e-10, 10).unwrap();
        assert_eq!((x, y), (0.4, -0.3));
    }

    #[test]
    fn undistort_roundtrip_thousand_points() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(42);
        for i in 0..1000 {
            let c = DistortionCoeffs {
                k1: rng.gen_range(-0.2..0.2),
                k2: rng.gen_range(-0.05..0.05),
                k3: 0.0,
                k4: 0.0,
                p1: rng.gen_range(-0.01..0.01),
                p2: rng.gen_range(-0.01..0.01),
            };
            // point inside the unit disc
            let r = rng.gen_range(0.0f64..1.0).sqrt();
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let (x, y) = (r * th.cos(), r * th.sin());
            let (xd, yd) = distort_point(x, y, &c);
            let (xu, yu) = undistort_point(xd, yd, &c, 1e-10, 10)
                .unwrap_or_else(|e| panic!("iteration {i} failed: {e}"));
            let (xrt, yrt) = distort_point(xu, yu, &c);
            let res = (xrt - xd).abs().max((yrt - yd).abs());
            assert!(res < 1e-10, "iteration {i}: residual {res}");
            // and the recovered point matches the original
            assert!((xu - x).abs() < 1e-8 && (yu - y).abs() < 1e-8);
        }
    }

    #[test]
    fn undistort_non_injective_raises() {
        // strong negative k1: the forward map folds before r = 1.4
        let c = DistortionCoeffs { k1: -0.5, ..Default::default() };
        let out = undistort_point(1.4, 0.0, &c, 1e-12, 20);
        assert!(
            matches!(out, Err(Error::Convergence { .. }) | Err(Error::Singular(_))),
            "expected failure, got {out:?}"
        );
    }

    fn plain_camera(w: usize, h: usize, c: DistortionCoeffs) -> CameraModel {
        CameraModel::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            w as f64 / 2.0,
            h as f64 / 2.0,
            w,
            h,
            c,
        )
    }

    #[test]
    fn map_identity_for_zero_coeffs() {
        let cam = plain_camera(16, 12, DistortionCoeffs::default());
        let map = build_distortion_map(&cam).unwrap();
        assert_eq!(map.valid_count(), 16 * 12);
        for iy in 0..12 {
            for ix in 0..16 {
                let i = iy * 16 + ix;
                assert_eq!(map.source_x[i], ix as f64 + 0.5);
                assert_eq!(map.source_y[i], iy as f64 + 0.5);
            }
        }
    }

    #[test]
    fn map_entries_forward_distort_back_to_pixel() {
        let cam = plain_camera(24, 24, DistortionCoeffs { k1: 0.08, k2: -0.01, p1: 0.002, p2: 0.001, ..Default::default() });
        let map = build_distortion_map(&cam).unwrap();
        for iy in 0..24 {
            for ix in 0..24 {
                let i = iy * 24 + ix;
                if !map.mask[i] {
                    continue;
                }
                let x = (map.source_x[i] - cam.cx) / cam.fx;
                let y = (map.source_y[i] - cam.cy) / cam.fy;
                let (xd, yd) = distort_point(x, y, &cam.distortion);
                let px = xd * cam.fx + cam.cx;
                let py = yd * cam.fy + cam.cy;
                assert!((px - (ix as f64 + 0.5)).abs() < 1e-7);
                assert!((py - (iy as f64 + 0.5)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn strong_barrel_masks_corners() {
        // k1 < 0 pulls content inward, so corner sources land outside the frame
        let cam = plain_camera(32, 32, DistortionCoeffs { k1: -0.3, ..Default::default() });
        let map = build_distortion_map(&cam).unwrap();
        assert!(!map.mask[0], "corner should be masked");
        assert!(!map.mask[31], "corner should be masked");
        assert!(!map.mask[31 * 32], "corner should be masked");
        assert!(!map.mask[32 * 32 - 1], "corner should be masked");
        let center = 16 * 32 + 16;
        assert!(map.mask[center], "center should stay valid");
        assert!(map.valid_count() > 32 * 32 / 2);
    }

    #[test]
    fn apply_map_identity_returns_input() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        let img = ImagePlane::new(10, 7, (0..70).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
        let map = DistortionMap::identity(10, 7);
        let out = apply_map(&img, &map).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn apply_map_exact_center_picks_pixel() {
        let mut map = DistortionMap::identity(5, 5);
        // retarget pixel (1,1) to the center of pixel (3,2)
        map.source_x[6] = 3.5;
        map.source_y[6] = 2.5;
        let mut img = ImagePlane::zeros(5, 5);
        *img.at_mut(3, 2) = 0.77;
        let out = apply_map(&img, &map).unwrap();
        assert_eq!(out.at(1, 1), 0.77);
    }

    #[test]
    fn apply_map_constant_stays_constant() {
        let cam = plain_camera(20, 20, DistortionCoeffs { k1: 0.1, p1: 0.003, ..Default::default() });
        let map = build_distortion_map(&cam).unwrap();
        let img = ImagePlane::constant(20, 20, 0.31);
        let out = apply_map(&img, &map).unwrap();
        for i in 0..400 {
            if map.mask[i] {
                assert!((out.data[i] - 0.31).abs() < 1e-12);
            } else {
                assert_eq!(out.data[i], 0.0);
            }
        }
    }

    #[test]
    fn apply_map_is_linear_in_the_image() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(19);
        let cam = plain_camera(16, 16, test_coeffs());
        let map = build_distortion_map(&cam).unwrap();
        let a = ImagePlane::new(16, 16, (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = ImagePlane::new(16, 16, (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (alpha, beta) = (0.7, -1.3);
        let combo = a.zip(&b, |x, y| alpha * x + beta * y).unwrap();
        let lhs = apply_map(&combo, &map).unwrap();
        let ra = apply_map(&a, &map).unwrap();
        let rb = apply_map(&b, &map).unwrap();
        for i in 0..256 {
            let rhs = alpha * ra.data[i] + beta * rb.data[i];
            assert!((lhs.data[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_map_backward_matches_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(29);
        let cam = plain_camera(12, 12, test_coeffs());
        let map = build_distortion_map(&cam).unwrap();
        let img = ImagePlane::new(12, 12, (0..144).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        // loss = sum of squared output pixels
        let out = apply_map(&img, &map).unwrap();
        let d_out = out.map(|v| 2.0 * v);
        let grad = apply_map_backward(&d_out, &map).unwrap();
        let h = 1e-6;
        let loss = |im: &ImagePlane| -> f64 {
            apply_map(im, &map).unwrap().data.iter().map(|v| v * v).sum()
        };
        for i in (0..144).step_by(7) {
            let mut plus = img.clone();
            plus.data[i] += h;
            let mut minus = img.clone();
            minus.data[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad.data[i].abs()).max(1e-8);
            assert!(
                (fd - grad.data[i]).abs() / denom < 1e-4,
                "pixel {i}: fd {fd} vs analytic {}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn apply_map_rejects_shape_mismatch() {
        let map = DistortionMap::identity(4, 4);
        let img = ImagePlane::zeros(5, 4);
        assert!(matches!(apply_map(&img, &map), Err(Error::Validation(_))));
    }
}
