//! Cloud serialization: JSON header plus binary parameter blocks.
//!
//! The export format carries f32 payloads. Training checkpoints, which need
//! bit-exact resume, store the cloud at full precision separately.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{Gaussian3D, GaussianCloud};
use crate::blocks::{read_block, write_block, Scalar};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CloudHeader {
    count: usize,
    mu: String,
    rot: String,
    log_scale: String,
    color_raw: String,
    opacity_logit: String,
}

/// Write `cloud.json` plus one block file per parameter group next to it.
pub fn save_cloud(cloud: &GaussianCloud, json_path: impl AsRef<Path>) -> Result<()> {
    let json_path = json_path.as_ref();
    let stem = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".into());
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let n = cloud.len();

    let mut mu = Vec::with_capacity(n * 3);
    let mut rot = Vec::with_capacity(n * 4);
    let mut ls = Vec::with_capacity(n * 3);
    let mut color = Vec::with_capacity(n);
    let mut opacity = Vec::with_capacity(n);
    for g in &cloud.gaussians {
        mu.extend_from_slice(&[g.mu.x, g.mu.y, g.mu.z]);
        rot.extend_from_slice(&g.rot);
        ls.extend_from_slice(&[g.log_scale.x, g.log_scale.y, g.log_scale.z]);
        color.push(g.color_raw);
        opacity.push(g.opacity_logit);
    }

    let header = CloudHeader {
        count: n,
        mu: format!("{stem}.mu.bin"),
        rot: format!("{stem}.rot.bin"),
        log_scale: format!("{stem}.log_scale.bin"),
        color_raw: format!("{stem}.color_raw.bin"),
        opacity_logit: format!("{stem}.opacity_logit.bin"),
    };
    write_block(dir.join(&header.mu), n, 3, Scalar::F32, &mu)?;
    write_block(dir.join(&header.rot), n, 4, Scalar::F32, &rot)?;
    write_block(dir.join(&header.log_scale), n, 3, Scalar::F32, &ls)?;
    write_block(dir.join(&header.color_raw), n, 1, Scalar::F32, &color)?;
    write_block(dir.join(&header.opacity_logit), n, 1, Scalar::F32, &opacity)?;
    std::fs::write(json_path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Load a cloud written by [`save_cloud`]. Optimizer moments and gradient
/// stats start from zero.
pub fn load_cloud(json_path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let json_path = json_path.as_ref();
    let header: CloudHeader = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let (n_mu, s_mu, mu) = read_block(dir.join(&header.mu))?;
    let (n_rot, s_rot, rot) = read_block(dir.join(&header.rot))?;
    let (n_ls, s_ls, ls) = read_block(dir.join(&header.log_scale))?;
    let (n_c, s_c, color) = read_block(dir.join(&header.color_raw))?;
    let (n_o, s_o, opacity) = read_block(dir.join(&header.opacity_logit))?;
    let n = header.count;
    if [n_mu, n_rot, n_ls, n_c, n_o] != [n; 5] || (s_mu, s_rot, s_ls, s_c, s_o) != (3, 4, 3, 1, 1) {
        return Err(Error::Validation("cloud block shapes disagree with header".into()));
    }
    let gaussians = (0..n)
        .map(|i| Gaussian3D {
            mu: Vector3::new(mu[i * 3], mu[i * 3 + 1], mu[i * 3 + 2]),
            rot: [rot[i * 4], rot[i * 4 + 1], rot[i * 4 + 2], rot[i * 4 + 3]],
            log_scale: Vector3::new(ls[i * 3], ls[i * 3 + 1], ls[i * 3 + 2]),
            color_raw: color[i],
            opacity_logit: opacity[i],
        })
        .collect();
    Ok(GaussianCloud::new(gaussians))
}
