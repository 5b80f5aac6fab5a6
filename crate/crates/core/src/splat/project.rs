//! Projection of 3D Gaussians to 2D image-plane footprints.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Gaussian3D, RenderSettings};
use crate::camera::CameraModel;

/// Rotation matrix from a (w, x, y, z) quaternion, normalized internally.
pub fn rotation_from_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `R S S^T R^T`; symmetric positive semi-definite by
/// construction.
pub fn covariance3d(rot: &[f64; 4], log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation_from_quat(rot);
    let s = log_scale.map(f64::exp);
    let a = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    a * a.transpose()
}

/// A Gaussian's 2D footprint after projection.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    /// Index into the cloud this splat came from.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    /// Dilated image-plane covariance.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space depth.
    pub depth: f64,
    /// Activated color and opacity.
    pub color: f64,
    pub opacity: f64,
}

/// Perspective Jacobian of the pinhole map at camera-space point `t`.
#[inline]
pub(crate) fn perspective_jacobian(cam: &CameraModel, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z * inv_z,
    )
}

/// Project one Gaussian. Returns `None` when culled (behind the near plane
/// or numerically degenerate).
pub fn project(
    g: &Gaussian3D,
    cam: &CameraModel,
    settings: &RenderSettings,
    index: usize,
) -> Option<ProjectedSplat> {
    let t = cam.world_to_camera(&g.mu);
    if t.z <= settings.near_plane {
        return None;
    }
    let (px, py) = cam.project_camera_point(&t);
    let jac = perspective_jacobian(cam, &t);
    let sigma = covariance3d(&g.rot, &g.log_scale);
    let m = cam.rotation * sigma * cam.rotation.transpose();
    let mut cov2d = jac * m * jac.transpose();
    cov2d[(0, 0)] += settings.dilation;
    cov2d[(1, 1)] += settings.dilation;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if !(det > 0.0) || !det.is_finite() || !px.is_finite() || !py.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    Some(ProjectedSplat {
        index,
        mean2d: Vector2::new(px, py),
        cov2d,
        conic,
        depth: t.z,
        color: g.color(),
        opacity: g.opacity(),
    })
}
