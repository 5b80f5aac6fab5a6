//! Pinhole camera with rigid pose and lens distortion coefficients.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::distortion::DistortionCoeffs;
use crate::error::{Error, Result};

/// World-to-camera extrinsics plus pinhole intrinsics in pixels.
///
/// Pixel centers sit at integer + 0.5; normalized image coordinates are
/// `(px - cx) / fx` and `(py - cy) / fy`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub distortion: DistortionCoeffs,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > 1e-9 {
            return Err(Error::Validation(format!(
                "rotation not orthonormal (max deviation {dev:.3e})"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pinhole projection of a camera-space point to pixel coordinates.
    #[inline]
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> (f64, f64) {
        (self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy)
    }

    /// Camera at `eye` looking at `target` with the given up hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        distortion: DistortionCoeffs,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        // camera frame: +x right, +y down, +z forward
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        Self {
            rotation,
            translation,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            distortion,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    /// Row-major 3x3 world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    distortion: DistortionCoeffs,
}

pub fn save_camera(cam: &CameraModel, path: impl AsRef<Path>) -> Result<()> {
    cam.validate()?;
    let r = &cam.rotation;
    let file = CameraFile {
        rotation: [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ],
        translation: [cam.translation.x, cam.translation.y, cam.translation.z],
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
        distortion: cam.distortion,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<CameraModel> {
    let text = std::fs::read_to_string(path)?;
    let f: CameraFile = serde_json::from_str(&text)?;
    let r = f.rotation;
    let cam = CameraModel {
        rotation: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
        translation: Vector3::new(f.translation[0], f.translation[1], f.translation[2]),
        fx: f.fx,
        fy: f.fy,
        cx: f.cx,
        cy: f.cy,
        width: f.width,
        height: f.height,
        distortion: f.distortion,
    };
    cam.validate()?;
    Ok(cam)
}
