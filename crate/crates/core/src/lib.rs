//! Noise-robust HDR 3D Gaussian splatting from noisy raw sensor images.
//!
//! The crate bundles the whole desk-scale pipeline: the RAWF raw-frame
//! format and image metrics, a physical sensor-noise model with calibration,
//! lens-distortion resampling, a differentiable CPU splatting renderer with
//! an analytic backward pass, the reconstruction losses (including the
//! noise-robust variant with a jointly trained noise extractor), Monte Carlo
//! analysis tools, and the training harness behind the CLI.

pub mod analysis;
pub mod blocks;
pub mod calibration;
pub mod camera;
pub mod distortion;
pub mod error;
pub mod extractor;
pub mod losses;
pub mod noise;
pub mod numcheck;
pub mod optim;
pub mod raw;
pub mod splat;
pub mod train;

pub use camera::CameraModel;
pub use distortion::{DistortionCoeffs, DistortionMap};
pub use error::{Error, Result};
pub use noise::{IsoNoiseParams, NoiseMode, NoiseModelParams};
pub use raw::{ImagePlane, RawImage};
pub use splat::{Gaussian3D, GaussianCloud};
