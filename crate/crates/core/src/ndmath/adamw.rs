//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moments of one parameter.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdamWState {
    pub step_count: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// Updates one array in place.
///
/// `bc1`/`bc2` are the bias corrections `1 - β₁ᵗ` and `1 - β₂ᵗ` for the
/// current step.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    cfg: &AdamWConfig,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    if theta.len() != grad.len() {
        return Err(Error::domain(format!(
            "adamw: parameter has {} entries, gradient {}",
            theta.len(),
            grad.len()
        )));
    }
    if moments.m.is_empty() {
        moments.m = vec![0.0; theta.len()];
        moments.v = vec![0.0; theta.len()];
    }
    for (i, (p, &g)) in theta.iter_mut().zip(grad).enumerate() {
        let m = &mut moments.m[i];
        let v = &mut moments.v[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * cfg.weight_decay * *p;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// One optimizer step over every trainable parameter that carries a gradient.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else { continue };
        let moments = state.moments.entry(name.to_string()).or_default();
        adamw_update(p.value.data_mut(), grad, moments, cfg, bc1, bc2)?;
    }
    Ok(())
}
