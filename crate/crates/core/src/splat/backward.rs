//! Analytic reverse-mode differentiation of the splatting forward pass.
//!
//! The backward replays each pixel's compositing walk (same order, same
//! truncation) twice: once to get the pixel totals, once to form suffix sums
//! so every contributor's transmittance derivative is available without
//! storing per-pixel contributor lists. Per-splat 2D gradients accumulate in
//! a fixed number of row chunks merged in chunk order, which keeps the f64
//! reduction deterministic regardless of thread scheduling; the 2D-to-3D
//! chain rule then runs independently per splat.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::{covariance3d, perspective_jacobian, rotation_from_quat};
use super::render::RenderTrace;
use super::{sigmoid, GaussianCloud};
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::raw::ImagePlane;

/// Gradients for every parameter of every Gaussian, indexed like the cloud.
/// Culled Gaussians carry zeros and `visible = false`.
#[derive(Debug, Clone)]
pub struct CloudGrads {
    pub mu: Vec<Vector3<f64>>,
    pub rot: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub color_raw: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    /// Magnitude of this render's total screen-space positional gradient.
    pub screen_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl CloudGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![Vector3::zeros(); n],
            rot: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            color_raw: vec![0.0; n],
            opacity_logit: vec![0.0; n],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.mu.len() {
            for v in self.mu[i].iter() {
                m = m.max(v.abs());
            }
            for v in self.rot[i] {
                m = m.max(v.abs());
            }
            for v in self.log_scale[i].iter() {
                m = m.max(v.abs());
            }
            m = m.max(self.color_raw[i].abs());
            m = m.max(self.opacity_logit[i].abs());
        }
        m
    }
}

/// Per-splat accumulators for the image-plane quantities: color, opacity,
/// mean2d (2), and the symmetric conic (3).
const SPLAT_ACC: usize = 7;

/// Number of row chunks in the deterministic reduction; fixed so results do
/// not depend on the thread count.
const REDUCE_CHUNKS: usize = 16;

/// Differentiate a rendered image (and alpha map) back to all cloud
/// parameters. Requires the trace of the matching forward call.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &CameraModel,
    trace: &RenderTrace,
    d_image: &ImagePlane,
    d_alpha: Option<&ImagePlane>,
) -> Result<CloudGrads> {
    if trace.cloud_len != cloud.len() || trace.camera != *cam {
        return Err(Error::Validation(
            "stale render trace: cloud or camera changed since the forward pass".into(),
        ));
    }
    let (w, h) = (cam.width, cam.height);
    if d_image.width != w || d_image.height != h {
        return Err(Error::Validation("d_image shape mismatch".into()));
    }
    if let Some(da) = d_alpha {
        if da.width != w || da.height != h {
            return Err(Error::Validation("d_alpha shape mismatch".into()));
        }
    }
    let settings = &trace.settings;
    let cutoff_sq = settings.mahalanobis_cutoff * settings.mahalanobis_cutoff;
    let n_splats = trace.splats.len();

    // stage 1: accumulate per-splat 2D gradients over pixels, chunked by rows
    let chunk_rows = h.div_ceil(REDUCE_CHUNKS);
    let partials: Vec<Vec<f64>> = (0..REDUCE_CHUNKS)
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![0.0f64; n_splats * SPLAT_ACC];
            let y_begin = ci * chunk_rows;
            let y_end = ((ci + 1) * chunk_rows).min(h);
            for iy in y_begin..y_end {
                let py = iy as f64 + 0.5;
                let list = &trace.row_lists[iy];
                for ix in 0..w {
                    let g_img = d_image.data[iy * w + ix];
                    let g_alp = d_alpha.map_or(0.0, |da| da.data[iy * w + ix]);
                    if g_img == 0.0 && g_alp == 0.0 {
                        continue;
                    }
                    let px = ix as f64 + 0.5;

                    // pass 1: totals, replaying the forward walk exactly
                    let mut color_total = 0.0f64;
                    let mut alpha_total = 0.0f64;
                    {
                        let mut transmittance = 1.0f64;
                        for &si in list {
                            let (x0, x1) = trace.x_ranges[si as usize];
                            let ixu = ix as u32;
                            if ixu < x0 || ixu > x1 {
                                continue;
                            }
                            let splat = &trace.splats[si as usize];
                            let dx = px - splat.mean2d.x;
                            let dy = py - splat.mean2d.y;
                            let mahal_sq = splat.conic[(0, 0)] * dx * dx
                                + 2.0 * splat.conic[(0, 1)] * dx * dy
                                + splat.conic[(1, 1)] * dy * dy;
                            if mahal_sq > cutoff_sq {
                                continue;
                            }
                            let alpha =
                                (splat.opacity * (-0.5 * mahal_sq).exp()).min(settings.alpha_clamp);
                            color_total += splat.color * alpha * transmittance;
                            alpha_total += alpha * transmittance;
                            transmittance *= 1.0 - alpha;
                            if transmittance < settings.transmittance_floor {
                                break;
                            }
                        }
                    }

                    // pass 2: per-contributor gradients via suffix sums
                    let mut transmittance = 1.0f64;
                    let mut color_prefix = 0.0f64;
                    let mut alpha_prefix = 0.0f64;
                    for &si in list {
                        let (x0, x1) = trace.x_ranges[si as usize];
                        let ixu = ix as u32;
                        if ixu < x0 || ixu > x1 {
                            continue;
                        }
                        let splat = &trace.splats[si as usize];
                        let dx = px - splat.mean2d.x;
                        let dy = py - splat.mean2d.y;
                        let mahal_sq = splat.conic[(0, 0)] * dx * dx
                            + 2.0 * splat.conic[(0, 1)] * dx * dy
                            + splat.conic[(1, 1)] * dy * dy;
                        if mahal_sq > cutoff_sq {
                            continue;
                        }
                        let alpha_raw = splat.opacity * (-0.5 * mahal_sq).exp();
                        let clamped = alpha_raw > settings.alpha_clamp;
                        let alpha = alpha_raw.min(settings.alpha_clamp);
                        let weight = alpha * transmittance;
                        color_prefix += splat.color * weight;
                        alpha_prefix += weight;

                        let base = si as usize * SPLAT_ACC;
                        // d value / d color
                        acc[base] += g_img * weight;

                        // d (value, alpha_map) / d alpha_i through the suffix
                        let suffix_color = color_total - color_prefix;
                        let suffix_alpha = alpha_total - alpha_prefix;
                        let one_minus = 1.0 - alpha;
                        let d_alpha_i = g_img * (splat.color * transmittance - suffix_color / one_minus)
                            + g_alp * (transmittance - suffix_alpha / one_minus);

                        if !clamped {
                            // alpha = opacity * exp(power), power = -mahal_sq / 2
                            let d_power = d_alpha_i * alpha;
                            acc[base + 1] += d_alpha_i * alpha / splat.opacity; // d opacity (activated)
                            // d power / d mean2d = conic * d  (d = p - mean2d)
                            let cd_x = splat.conic[(0, 0)] * dx + splat.conic[(0, 1)] * dy;
                            let cd_y = splat.conic[(1, 0)] * dx + splat.conic[(1, 1)] * dy;
                            acc[base + 2] += d_power * cd_x;
                            acc[base + 3] += d_power * cd_y;
                            // d power / d conic = -(d d^T) / 2, symmetric
                            acc[base + 4] += d_power * (-0.5 * dx * dx);
                            acc[base + 5] += d_power * (-dx * dy); // carries both off-diagonals
                            acc[base + 6] += d_power * (-0.5 * dy * dy);
                        }

                        transmittance *= one_minus;
                        if transmittance < settings.transmittance_floor {
                            break;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut acc2d = vec![0.0f64; n_splats * SPLAT_ACC];
    for partial in &partials {
        for (a, p) in acc2d.iter_mut().zip(partial) {
            *a += p;
        }
    }

    // stage 2: chain 2D gradients to 3D parameters, independently per splat
    let per_splat: Vec<(usize, Vector3<f64>, [f64; 4], Vector3<f64>, f64, f64, f64)> = trace
        .splats
        .par_iter()
        .enumerate()
        .map(|(si, splat)| {
            let base = si * SPLAT_ACC;
            let d_color_act = acc2d[base];
            let d_opacity_act = acc2d[base + 1];
            let d_mean2d = Vector2::new(acc2d[base + 2], acc2d[base + 3]);
            let d_conic =
                Matrix2::new(acc2d[base + 4], 0.5 * acc2d[base + 5], 0.5 * acc2d[base + 5], acc2d[base + 6]);
            let g = &cloud.gaussians[splat.index];

            // conic = cov2d^{-1}: dL/dV = -conic dConic conic (all symmetric)
            let d_cov = -splat.conic * d_conic * splat.conic;

            // V = J M J^T + dilation, M = W Sigma W^T
            let t = cam.world_to_camera(&g.mu);
            let jac = perspective_jacobian(cam, &t);
            let sigma = covariance3d(&g.rot, &g.log_scale);
            let m = cam.rotation * sigma * cam.rotation.transpose();
            let d_m = jac.transpose() * d_cov * jac;
            let d_jac = 2.0 * d_cov * jac * m;
            let d_sigma = cam.rotation.transpose() * d_m * cam.rotation;

            // pinhole mean gradient -> camera-space point
            let inv_z = 1.0 / t.z;
            let mut d_t = Vector3::new(
                d_mean2d.x * cam.fx * inv_z,
                d_mean2d.y * cam.fy * inv_z,
                -d_mean2d.x * cam.fx * t.x * inv_z * inv_z
                    - d_mean2d.y * cam.fy * t.y * inv_z * inv_z,
            );
            // J's own dependence on t
            d_t.x += d_jac[(0, 2)] * (-cam.fx * inv_z * inv_z);
            d_t.y += d_jac[(1, 2)] * (-cam.fy * inv_z * inv_z);
            d_t.z += d_jac[(0, 0)] * (-cam.fx * inv_z * inv_z)
                + d_jac[(0, 2)] * (2.0 * cam.fx * t.x * inv_z * inv_z * inv_z)
                + d_jac[(1, 1)] * (-cam.fy * inv_z * inv_z)
                + d_jac[(1, 2)] * (2.0 * cam.fy * t.y * inv_z * inv_z * inv_z);
            let d_mu = cam.rotation.transpose() * d_t;

            // Sigma = A A^T with A = R S
            let r = rotation_from_quat(&g.rot);
            let s = g.log_scale.map(f64::exp);
            let a = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
            let d_a = 2.0 * d_sigma * a;
            // d log_scale_k = s_k * sum_row R[row,k] dA[row,k]
            let mut d_log_scale = Vector3::zeros();
            for k in 0..3 {
                let mut acc = 0.0;
                for row in 0..3 {
                    acc += r[(row, k)] * d_a[(row, k)];
                }
                d_log_scale[k] = acc * s[k];
            }
            // dR = dA S
            let d_r = Matrix3::from_columns(&[
                d_a.column(0) * s.x,
                d_a.column(1) * s.y,
                d_a.column(2) * s.z,
            ]);
            let d_rot = quat_grad_from_rotation_grad(&g.rot, &d_r);

            // activations
            let d_color_raw = d_color_act * sigmoid(g.color_raw);
            let d_opacity_logit = d_opacity_act * splat.opacity * (1.0 - splat.opacity);

            (
                splat.index,
                d_mu,
                d_rot,
                d_log_scale,
                d_color_raw,
                d_opacity_logit,
                d_mean2d.norm(),
            )
        })
        .collect();

    let mut grads = CloudGrads::zeros(cloud.len());
    for (idx, d_mu, d_rot, d_ls, d_c, d_o, screen_norm) in per_splat {
        grads.mu[idx] = d_mu;
        grads.rot[idx] = d_rot;
        grads.log_scale[idx] = d_ls;
        grads.color_raw[idx] = d_c;
        grads.opacity_logit[idx] = d_o;
        grads.screen_grad_norm[idx] = screen_norm;
        grads.visible[idx] = true;
    }
    Ok(grads)
}

/// Chain a rotation-matrix gradient to the raw quaternion, including the
/// internal normalization Jacobian so finite differences on raw components
/// agree.
fn quat_grad_from_rotation_grad(q_raw: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let norm = (q_raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q = [q_raw[0] / norm, q_raw[1] / norm, q_raw[2] / norm, q_raw[3] / norm];
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);

    // dR/d(unit q) contracted with dL/dR
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let contract = |m: &Matrix3<f64>| -> f64 { m.component_mul(d_r).sum() };
    let d_unit = [contract(&dr_dw), contract(&dr_dx), contract(&dr_dy), contract(&dr_dz)];

    // through normalization: d(unit)/d(raw) = (I - q q^T) / norm
    let dot: f64 = q.iter().zip(&d_unit).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (d_unit[i] - q[i] * dot) / norm;
    }
    out
}
