//! Forward splatting: depth-sorted, front-to-back alpha compositing.

use nalgebra::Vector2;
use rayon::prelude::*;

use super::project::{project, ProjectedSplat};
use super::GaussianCloud;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::raw::ImagePlane;

/// Rendering configuration. The truncation knobs exist so gradient checks
/// can disable them (`mahalanobis_cutoff = inf`, `transmittance_floor = 0`)
/// for exact correspondence with finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Gaussians at camera-space depth below this are culled.
    pub near_plane: f64,
    /// Added to both diagonal entries of every 2D covariance (px^2).
    pub dilation: f64,
    /// Contributions beyond this Mahalanobis radius are treated as zero.
    pub mahalanobis_cutoff: f64,
    /// Per-splat alpha is clamped to at most this value.
    pub alpha_clamp: f64,
    /// Per-pixel compositing stops once transmittance drops below this.
    pub transmittance_floor: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near_plane: 0.01,
            dilation: 0.3,
            mahalanobis_cutoff: 3.0,
            alpha_clamp: 0.999,
            transmittance_floor: 1e-4,
        }
    }
}

impl RenderSettings {
    /// Truncation-free settings for finite-difference validation.
    pub fn exact() -> Self {
        Self { mahalanobis_cutoff: f64::INFINITY, transmittance_floor: 0.0, ..Self::default() }
    }
}

/// Everything the backward pass needs to replay the forward compositing.
#[derive(Debug, Clone)]
pub struct RenderTrace {
    /// Splats sorted front to back by (depth, cloud index).
    pub splats: Vec<ProjectedSplat>,
    /// For each image row, indices into `splats` whose footprint reaches it,
    /// preserving the sorted order.
    pub row_lists: Vec<Vec<u32>>,
    /// Per-splat inclusive pixel x-range of the footprint.
    pub x_ranges: Vec<(u32, u32)>,
    pub settings: RenderSettings,
    pub cloud_len: usize,
    pub camera: CameraModel,
}

pub struct RenderOutput {
    pub image: ImagePlane,
    /// Accumulated opacity per pixel (1 - final transmittance).
    pub alpha: ImagePlane,
    pub trace: RenderTrace,
}

/// Inclusive pixel bounds of a splat footprint, or `None` when it misses the
/// frame entirely.
fn footprint(
    splat: &ProjectedSplat,
    width: usize,
    height: usize,
    cutoff: f64,
) -> Option<(u32, u32, u32, u32)> {
    let (w, h) = (width as f64, height as f64);
    let (lo_x, hi_x, lo_y, hi_y) = if cutoff.is_finite() {
        // bounding radius from the largest eigenvalue of the 2x2 covariance
        let a = splat.cov2d[(0, 0)];
        let b = splat.cov2d[(0, 1)];
        let c = splat.cov2d[(1, 1)];
        let lam_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let r = cutoff * lam_max.max(0.0).sqrt();
        (
            splat.mean2d.x - r,
            splat.mean2d.x + r,
            splat.mean2d.y - r,
            splat.mean2d.y + r,
        )
    } else {
        (0.0, w, 0.0, h)
    };
    // pixel centers at integer + 0.5
    let x0 = (lo_x - 0.5).ceil().max(0.0);
    let x1 = (hi_x - 0.5).floor().min(w - 1.0);
    let y0 = (lo_y - 0.5).ceil().max(0.0);
    let y1 = (hi_y - 0.5).floor().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as u32, x1 as u32, y0 as u32, y1 as u32))
}

pub(super) fn build_trace(
    cloud: &GaussianCloud,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Result<RenderTrace> {
    cam.validate()?;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Validation(format!("non-finite parameter in gaussian {i}")));
        }
    }
    let mut splats: Vec<ProjectedSplat> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, cam, settings, i))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let mut row_lists: Vec<Vec<u32>> = vec![Vec::new(); cam.height];
    let mut x_ranges = vec![(1u32, 0u32); splats.len()];
    for (si, splat) in splats.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = footprint(splat, cam.width, cam.height, settings.mahalanobis_cutoff) {
            x_ranges[si] = (x0, x1);
            for row in row_lists.iter_mut().take(y1 as usize + 1).skip(y0 as usize) {
                row.push(si as u32);
            }
        }
    }
    Ok(RenderTrace {
        splats,
        row_lists,
        x_ranges,
        settings: *settings,
        cloud_len: cloud.len(),
        camera: cam.clone(),
    })
}

/// Render the cloud from a camera. An empty cloud renders zeros.
pub fn render(cloud: &GaussianCloud, cam: &CameraModel, settings: &RenderSettings) -> Result<RenderOutput> {
    let trace = build_trace(cloud, cam, settings)?;
    let (w, h) = (cam.width, cam.height);
    let cutoff_sq = settings.mahalanobis_cutoff * settings.mahalanobis_cutoff;

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|iy| {
            let mut img_row = vec![0.0f64; w];
            let mut alpha_row = vec![0.0f64; w];
            let py = iy as f64 + 0.5;
            let list = &trace.row_lists[iy];
            for ix in 0..w {
                let px = ix as f64 + 0.5;
                let mut transmittance = 1.0f64;
                let mut value = 0.0f64;
                let mut alpha_acc = 0.0f64;
                for &si in list {
                    let (x0, x1) = trace.x_ranges[si as usize];
                    let ixu = ix as u32;
                    if ixu < x0 || ixu > x1 {
                        continue;
                    }
                    let splat = &trace.splats[si as usize];
                    let d = Vector2::new(px - splat.mean2d.x, py - splat.mean2d.y);
                    let mahal_sq = splat.conic[(0, 0)] * d.x * d.x
                        + 2.0 * splat.conic[(0, 1)] * d.x * d.y
                        + splat.conic[(1, 1)] * d.y * d.y;
                    if mahal_sq > cutoff_sq {
                        continue;
                    }
                    let alpha = (splat.opacity * (-0.5 * mahal_sq).exp()).min(settings.alpha_clamp);
                    value += splat.color * alpha * transmittance;
                    alpha_acc += alpha * transmittance;
                    transmittance *= 1.0 - alpha;
                    if transmittance < settings.transmittance_floor {
                        break;
                    }
                }
                img_row[ix] = value;
                alpha_row[ix] = alpha_acc;
            }
            (img_row, alpha_row)
        })
        .collect();

    let mut image = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    for (img_row, alpha_row) in rows {
        image.extend(img_row);
        alpha.extend(alpha_row);
    }
    Ok(RenderOutput {
        image: ImagePlane { width: w, height: h, data: image },
        alpha: ImagePlane { width: w, height: h, data: alpha },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortion::DistortionCoeffs;
    use crate::splat::{quat_from_axis_angle, quat_mul, rotation_from_quat, sigmoid, Gaussian3D};
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};

    fn camera(w: usize, h: usize) -> CameraModel {
        CameraModel::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            32.0,
            32.0,
            w,
            h,
            DistortionCoeffs::default(),
        )
    }

    fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| Gaussian3D {
                mu: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                rot: quat_from_axis_angle(
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                    rng.gen_range(-3.0..3.0),
                ),
                log_scale: Vector3::new(
                    rng.gen_range(-2.5..-1.0),
                    rng.gen_range(-2.5..-1.0),
                    rng.gen_range(-2.5..-1.0),
                ),
                color_raw: rng.gen_range(-1.0..1.5),
                opacity_logit: rng.gen_range(-2.0..2.0),
            })
            .collect();
        GaussianCloud::new(gaussians)
    }

    #[test]
    fn empty_cloud_renders_zeros() {
        let cloud = GaussianCloud::new(Vec::new());
        let out = render(&cloud, &camera(8, 8), &RenderSettings::default()).unwrap();
        assert!(out.image.data.iter().all(|&v| v == 0.0));
        assert!(out.alpha.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opaque_gaussian_reaches_activated_color_at_mean() {
        let cloud = GaussianCloud::new(vec![Gaussian3D {
            mu: Vector3::zeros(),
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::new(-0.5, -0.5, -0.5),
            color_raw: 0.8,
            opacity_logit: 20.0, // opacity ~ 1
        }]);
        // odd size: the projected mean lands exactly on pixel (8, 8)'s center
        let cam = camera(17, 17);
        let out = render(&cloud, &cam, &RenderSettings::default()).unwrap();
        let got = out.image.at(8, 8);
        let color = cloud.gaussians[0].color();
        // alpha clamps at 0.999, the exponent is 0 at the mean
        assert!((got - color * 0.999).abs() < 1e-12, "got {got} vs activated color {color}");
    }

    #[test]
    fn two_gaussian_compositing_matches_hand_rolled() {
        // both on the optical axis, covering the central pixel
        let make = |z: f64, color_raw: f64, logit: f64| Gaussian3D {
            mu: Vector3::new(0.0, 0.0, z),
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::new(-0.3, -0.3, -0.3),
            color_raw,
            opacity_logit: logit,
        };
        let cloud = GaussianCloud::new(vec![make(0.5, 0.9, 0.4), make(-0.5, -0.2, 1.1)]);
        let cam = camera(17, 17); // odd size: center pixel 8 has center 8.5 = cx
        let settings = RenderSettings::exact();
        let out = render(&cloud, &cam, &settings).unwrap();

        // hand-rolled two-term evaluation at the central pixel
        let front = &cloud.gaussians[1]; // z=-0.5 is closer to the eye at z=-4
        let back = &cloud.gaussians[0];
        // on-axis pixel sits exactly at both projected means, so the exponent is 0
        let eval = |g: &Gaussian3D| -> (f64, f64) { (g.color(), sigmoid(g.opacity_logit)) };
        let (c1, a1) = eval(front);
        let (c2, a2) = eval(back);
        let expect = c1 * a1 + c2 * a2 * (1.0 - a1);
        let got = out.image.at(8, 8);
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn storage_order_permutation_is_bit_identical() {
        let cloud = random_cloud(40, 123);
        let cam = camera(24, 24);
        let out_a = render(&cloud, &cam, &RenderSettings::default()).unwrap();
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        let mut rng = rand::rngs::StdRng::seed_from_u64(999);
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = GaussianCloud::new(perm.iter().map(|&i| cloud.gaussians[i].clone()).collect());
        let out_b = render(&permuted, &cam, &RenderSettings::default()).unwrap();
        assert_eq!(out_a.image.data, out_b.image.data);
        assert_eq!(out_a.alpha.data, out_b.alpha.data);
    }

    #[test]
    fn compositing_weights_never_exceed_one() {
        for seed in 0..5 {
            let cloud = random_cloud(120, seed);
            let out = render(&cloud, &camera(20, 20), &RenderSettings::default()).unwrap();
            for &a in &out.alpha.data {
                assert!(a <= 1.0, "alpha sum {a} > 1");
                assert!(a >= 0.0);
            }
            for &v in &out.image.data {
                assert!(v >= 0.0, "negative rendered value {v}");
            }
        }
    }

    #[test]
    fn rigid_invariance() {
        let cloud = random_cloud(30, 7);
        let cam = camera(20, 20);
        let settings = RenderSettings::default();
        let base = render(&cloud, &cam, &settings).unwrap();

        // rigid transform of the world
        let q0 = quat_from_axis_angle(Vector3::new(0.2, 1.0, -0.4), 0.9);
        let r0 = rotation_from_quat(&q0);
        let t0 = Vector3::new(0.3, -0.2, 0.5);
        let moved = GaussianCloud::new(
            cloud
                .gaussians
                .iter()
                .map(|g| Gaussian3D {
                    mu: r0 * g.mu + t0,
                    rot: quat_mul(q0, g.rot),
                    ..g.clone()
                })
                .collect(),
        );
        // compensating camera: W' = W R0^T, T' = T - W R0^T t0
        let w_new: Matrix3<f64> = cam.rotation * r0.transpose();
        let cam2 = CameraModel {
            rotation: w_new,
            translation: cam.translation - w_new * t0,
            ..cam.clone()
        };
        let out = render(&moved, &cam2, &settings).unwrap();
        for (a, b) in base.image.data.iter().zip(&out.image.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_parameter_rejected() {
        let mut cloud = random_cloud(3, 1);
        cloud.gaussians[1].mu.x = f64::NAN;
        let err = render(&cloud, &camera(8, 8), &RenderSettings::default());
        assert!(matches!(err, Err(crate::error::Error::Validation(_))));
    }
}
