//! Adaptive density control: clone, split, prune.

use nalgebra::Vector3;
use rand_distr::{Distribution, StandardNormal};

use super::project::rotation_from_quat;
use super::{CloudOptState, Gaussian3D, GaussianCloud, ParamMoments, ScreenGradStats};
use crate::error::{Error, Result};
use crate::noise::CounterRng;

/// Split children shrink by this factor.
const SPLIT_SCALE_FACTOR: f64 = 1.6;
/// Clone nudge length as a fraction of the parent's largest scale.
const CLONE_NUDGE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub before: usize,
    pub after: usize,
}

struct Rebuild {
    gaussians: Vec<Gaussian3D>,
    mu_m: Vec<f64>,
    mu_v: Vec<f64>,
    rot_m: Vec<f64>,
    rot_v: Vec<f64>,
    ls_m: Vec<f64>,
    ls_v: Vec<f64>,
    c_m: Vec<f64>,
    c_v: Vec<f64>,
    o_m: Vec<f64>,
    o_v: Vec<f64>,
}

impl Rebuild {
    fn with_capacity(n: usize) -> Self {
        Self {
            gaussians: Vec::with_capacity(n),
            mu_m: Vec::with_capacity(n * 3),
            mu_v: Vec::with_capacity(n * 3),
            rot_m: Vec::with_capacity(n * 4),
            rot_v: Vec::with_capacity(n * 4),
            ls_m: Vec::with_capacity(n * 3),
            ls_v: Vec::with_capacity(n * 3),
            c_m: Vec::with_capacity(n),
            c_v: Vec::with_capacity(n),
            o_m: Vec::with_capacity(n),
            o_v: Vec::with_capacity(n),
        }
    }

    /// Keep gaussian `i` with its optimizer moments.
    fn carry(&mut self, cloud: &GaussianCloud, i: usize, g: Gaussian3D) {
        self.gaussians.push(g);
        for d in 0..3 {
            self.mu_m.push(cloud.opt.mu.m[i * 3 + d]);
            self.mu_v.push(cloud.opt.mu.v[i * 3 + d]);
            self.ls_m.push(cloud.opt.log_scale.m[i * 3 + d]);
            self.ls_v.push(cloud.opt.log_scale.v[i * 3 + d]);
        }
        for d in 0..4 {
            self.rot_m.push(cloud.opt.rot.m[i * 4 + d]);
            self.rot_v.push(cloud.opt.rot.v[i * 4 + d]);
        }
        self.c_m.push(cloud.opt.color_raw.m[i]);
        self.c_v.push(cloud.opt.color_raw.v[i]);
        self.o_m.push(cloud.opt.opacity_logit.m[i]);
        self.o_v.push(cloud.opt.opacity_logit.v[i]);
    }

    /// Add a fresh gaussian with zeroed moments.
    fn fresh(&mut self, g: Gaussian3D) {
        self.gaussians.push(g);
        for _ in 0..3 {
            self.mu_m.push(0.0);
            self.mu_v.push(0.0);
            self.ls_m.push(0.0);
            self.ls_v.push(0.0);
        }
        for _ in 0..4 {
            self.rot_m.push(0.0);
            self.rot_v.push(0.0);
        }
        self.c_m.push(0.0);
        self.c_v.push(0.0);
        self.o_m.push(0.0);
        self.o_v.push(0.0);
    }
}

/// Run one density-control pass over the cloud.
///
/// Gaussians whose mean screen gradient exceeds `grad_threshold` are cloned
/// (largest activated scale below `scale_split_threshold`, copy nudged along
/// the accumulated positional gradient) or split into exactly two children
/// shrunk by `1/1.6` and sampled inside the parent. Gaussians with activated
/// opacity below `opacity_prune_threshold` are pruned. Gradient statistics
/// reset afterwards; optimizer moments follow survivors and zero for
/// children.
///
/// `split_key` seeds the child-position draws (deterministic per gaussian).
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    grad_threshold: f64,
    scale_split_threshold: f64,
    opacity_prune_threshold: f64,
    split_key: u64,
) -> DensifyOutcome {
    let before = cloud.len();
    let mut out = DensifyOutcome { before, ..Default::default() };
    let mut next = Rebuild::with_capacity(before + before / 4);

    for i in 0..before {
        let g = &cloud.gaussians[i];
        if g.opacity() < opacity_prune_threshold {
            out.pruned += 1;
            continue;
        }
        let denom = cloud.stats.denom[i].max(1) as f64;
        let mean_grad = cloud.stats.accum_norm[i] / denom;
        if !(mean_grad > grad_threshold) {
            next.carry(cloud, i, g.clone());
            continue;
        }
        let scale = g.scale();
        let max_scale = scale.x.max(scale.y).max(scale.z);
        if max_scale < scale_split_threshold {
            // clone: keep the original, nudge the copy downhill
            let dir = cloud.stats.accum_world[i];
            let nudge = if dir.norm() > 0.0 {
                -dir.normalize() * CLONE_NUDGE_FRACTION * max_scale
            } else {
                Vector3::zeros()
            };
            let copy = Gaussian3D { mu: g.mu + nudge, ..g.clone() };
            next.carry(cloud, i, g.clone());
            next.fresh(copy);
            out.cloned += 1;
        } else {
            // split: two children sampled inside the parent, shrunk by 1/1.6
            let rot = rotation_from_quat(&g.rot);
            let shrunk = g.log_scale.map(|v| v - SPLIT_SCALE_FACTOR.ln());
            for child in 0..2u64 {
                let mut rng = CounterRng::from_key(&[split_key, i as u64, child]);
                let z = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                let offset = rot * Vector3::new(z.x * scale.x, z.y * scale.y, z.z * scale.z);
                next.fresh(Gaussian3D {
                    mu: g.mu + offset,
                    log_scale: shrunk,
                    ..g.clone()
                });
            }
            out.split += 1;
        }
    }

    let count = next.gaussians.len();
    out.after = count;
    cloud.gaussians = next.gaussians;
    cloud.opt = CloudOptState {
        step: cloud.opt.step,
        mu: ParamMoments { m: next.mu_m, v: next.mu_v },
        rot: ParamMoments { m: next.rot_m, v: next.rot_v },
        log_scale: ParamMoments { m: next.ls_m, v: next.ls_v },
        color_raw: ParamMoments { m: next.c_m, v: next.c_v },
        opacity_logit: ParamMoments { m: next.o_m, v: next.o_v },
    };
    cloud.stats = ScreenGradStats::zeros(count);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisotropyStats {
    pub median: f64,
    pub p95: f64,
    pub count: usize,
}

/// Median and 95th percentile of max-scale/min-scale ratios over the cloud.
pub fn anisotropy_stats(cloud: &GaussianCloud) -> Result<AnisotropyStats> {
    if cloud.is_empty() {
        return Err(Error::Validation("anisotropy_stats on an empty cloud".into()));
    }
    let mut ratios: Vec<f64> = cloud
        .gaussians
        .iter()
        .map(|g| {
            let s = g.scale();
            let max = s.x.max(s.y).max(s.z);
            let min = s.x.min(s.y).min(s.z);
            max / min
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let median = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    };
    let p95_idx = (((n - 1) as f64) * 0.95).round() as usize;
    Ok(AnisotropyStats { median, p95: ratios[p95_idx], count: n })
}
