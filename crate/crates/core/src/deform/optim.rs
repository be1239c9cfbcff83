//! Flat-parameter Adam and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Update steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update (bias-corrected) applied in place to `params`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", params.len()),
            got: format!("{} gradients, state of {}", grads.len(), state.len()),
        });
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidParam {
            name: "lr",
            reason: format!("learning rate must be finite and non-negative, got {lr}"),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

/// Polynomial decay: `lr0 * (1 - step/max_steps)^power`.
pub fn poly_lr(step: usize, max_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_steps == 0 {
        return Err(Error::InvalidParam {
            name: "max_steps",
            reason: "schedule needs at least one step".into(),
        });
    }
    if step > max_steps {
        return Err(Error::InvalidParam {
            name: "step",
            reason: format!("step {step} past the end of the schedule ({max_steps})"),
        });
    }
    if !(lr0.is_finite() && lr0 > 0.0) {
        return Err(Error::InvalidParam {
            name: "lr0",
            reason: format!("base learning rate must be finite and positive, got {lr0}"),
        });
    }
    Ok(lr0 * (1.0 - step as f64 / max_steps as f64).powf(power))
}
