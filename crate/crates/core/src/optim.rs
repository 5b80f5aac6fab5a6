//! Adam optimizer primitives and the piecewise learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update over a flat parameter slice.
///
/// `step` is the 1-based step count including this update. Moments update in
/// place. Non-finite gradients abort with a diagnostic.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::Validation(format!(
            "adam length mismatch: params {}, grads {}, m {}, v {}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    for (i, &g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient {g} at index {i}")));
        }
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..params.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grads[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Step-indexed learning rate: `initial` through `boundary` steps, `reduced`
/// afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLr {
    pub initial: f64,
    pub reduced: f64,
    pub boundary: u64,
}

impl PiecewiseLr {
    pub fn at_step(&self, step: u64) -> f64 {
        if step <= self.boundary {
            self.initial
        } else {
            self.reduced
        }
    }
}

impl Default for PiecewiseLr {
    fn default() -> Self {
        Self { initial: 1e-4, reduced: 1e-5, boundary: 25_000 }
    }
}

/// Self-contained Adam state for one parameter vector, with the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub schedule: PiecewiseLr,
}

impl AdamState {
    pub fn new(len: usize, schedule: PiecewiseLr) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, schedule }
    }

    /// Advance one step; the learning rate comes from the schedule at the new
    /// step count.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step += 1;
        let lr = self.schedule.at_step(self.step);
        adam_update(params, grads, &mut self.m, &mut self.v, self.step, lr)
    }
}
