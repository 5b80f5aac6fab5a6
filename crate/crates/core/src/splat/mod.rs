//! Desk-scale differentiable 3D Gaussian splatting.
//!
//! A scene is a set of anisotropic 3D Gaussians with learnable position,
//! rotation, scale, color and opacity. Rendering projects each Gaussian to a
//! 2D footprint (local affine approximation of the perspective map) and
//! alpha-composites front to back. The backward pass is fully analytic and
//! deterministic under a fixed chunked reduction order.

mod backward;
mod density;
mod io;
mod project;
mod render;

pub use backward::{render_backward, CloudGrads};
pub use density::{anisotropy_stats, densify_and_prune, AnisotropyStats, DensifyOutcome};
pub use io::{load_cloud, save_cloud};
pub use project::{covariance3d, project, rotation_from_quat, ProjectedSplat};
pub use render::{render, RenderOutput, RenderSettings, RenderTrace};

use nalgebra::Vector3;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`; keeps activated colors positive and
/// unbounded above for HDR radiance.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for initialization from target intensities.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(exp(y) - 1), stable for small and large y
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Hamilton product of two quaternions in (w, x, y, z) order.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_from_axis_angle(axis: Vector3<f64>, angle: f64) -> [f64; 4] {
    let a = axis.normalize() * (angle / 2.0).sin();
    [(angle / 2.0).cos(), a.x, a.y, a.z]
}

/// One learnable scene Gaussian. `rot` is kept near unit length by the
/// optimizer; the renderer normalizes it internally so gradients stay exact
/// for slightly off-unit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    /// Quaternion (w, x, y, z).
    pub rot: [f64; 4],
    /// Scale is `exp(log_scale)` per axis.
    pub log_scale: Vector3<f64>,
    /// Pre-activation color; activated by softplus (single raw channel).
    pub color_raw: f64,
    /// Pre-activation opacity; activated by sigmoid.
    pub opacity_logit: f64,
}

impl Gaussian3D {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn color(&self) -> f64 {
        softplus(self.color_raw)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.color_raw.is_finite()
            && self.opacity_logit.is_finite()
    }

    /// Renormalize the quaternion; called after every optimizer step.
    pub fn renormalize_rotation(&mut self) {
        let n = (self.rot.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if n > 0.0 {
            for v in self.rot.iter_mut() {
                *v /= n;
            }
        }
    }
}

/// Adam moments for one parameter group, flattened with a fixed stride.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParamMoments {
    fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// Per-parameter optimizer state for the cloud, remapped in lockstep with
/// densification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudOptState {
    pub step: u64,
    pub mu: ParamMoments,
    pub rot: ParamMoments,
    pub log_scale: ParamMoments,
    pub color_raw: ParamMoments,
    pub opacity_logit: ParamMoments,
}

impl CloudOptState {
    pub fn zeros(count: usize) -> Self {
        Self {
            step: 0,
            mu: ParamMoments::zeros(count * 3),
            rot: ParamMoments::zeros(count * 4),
            log_scale: ParamMoments::zeros(count * 3),
            color_raw: ParamMoments::zeros(count),
            opacity_logit: ParamMoments::zeros(count),
        }
    }
}

/// Screen-space gradient statistics driving density control.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScreenGradStats {
    /// Sum over renders of the per-render screen-gradient magnitude.
    pub accum_norm: Vec<f64>,
    /// Sum over renders of the world-space positional gradient; its direction
    /// nudges clones.
    pub accum_world: Vec<Vector3<f64>>,
    /// Number of renders in which the Gaussian was visible.
    pub denom: Vec<u32>,
}

impl ScreenGradStats {
    pub fn zeros(count: usize) -> Self {
        Self {
            accum_norm: vec![0.0; count],
            accum_world: vec![Vector3::zeros(); count],
            denom: vec![0; count],
        }
    }
}

/// The scene: Gaussians plus optimizer moments plus density-control stats,
/// kept index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian3D>,
    pub opt: CloudOptState,
    pub stats: ScreenGradStats,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        let n = gaussians.len();
        Self { gaussians, opt: CloudOptState::zeros(n), stats: ScreenGradStats::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Fold a render's gradients into the density-control statistics.
    pub fn accumulate_stats(&mut self, grads: &CloudGrads) {
        assert_eq!(grads.screen_grad_norm.len(), self.len(), "stats length mismatch");
        for i in 0..self.len() {
            if grads.visible[i] {
                self.stats.accum_norm[i] += grads.screen_grad_norm[i];
                self.stats.accum_world[i] += grads.mu[i];
                self.stats.denom[i] += 1;
            }
        }
    }
}
