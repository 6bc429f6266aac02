//! Adam with bias correction and weight decay applied independently of the
//! learning rate: the decay multiplies weights by (1 − λ) every step no
//! matter what the scheduler says.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};
use crate::model::backward::Gradients;
use crate::model::checkpoint::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Independent weight-decay rate λ.
    pub weight_decay: f64,
    /// Coefficient handed to the z-loss when this optimizer drives pretraining.
    pub z_coefficient: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
            z_coefficient: 5e-6,
        }
    }
}

/// Adam moment buffers mirroring a checkpoint's tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
    pub settings: OptimSettings,
}

impl OptimizerState {
    pub fn new(ckpt: &Checkpoint, settings: OptimSettings) -> Self {
        let zeros = |_: &str| -> BTreeMap<String, Vec<f32>> {
            ckpt.tensors
                .iter()
                .map(|(name, t)| (name.clone(), vec![0.0f32; t.len()]))
                .collect()
        };
        OptimizerState {
            m: zeros("m"),
            v: zeros("v"),
            step: 0,
            settings,
        }
    }
}

/// One element of the update law, in 64-bit: returns the new moments and the
/// bias-corrected step (before the learning rate and decay are applied).
#[inline]
pub fn adam_scalar(m: f64, v: f64, g: f64, step: u64, s: &OptimSettings) -> (f64, f64, f64) {
    let m_new = s.beta1 * m + (1.0 - s.beta1) * g;
    let v_new = s.beta2 * v + (1.0 - s.beta2) * g * g;
    let m_hat = m_new / (1.0 - s.beta1.powi(step as i32));
    let v_hat = v_new / (1.0 - s.beta2.powi(step as i32));
    (m_new, v_new, m_hat / (v_hat.sqrt() + s.eps))
}

/// Applies one optimizer step in place. On a NaN gradient the error is
/// returned before any weight or moment is touched.
pub fn optimizer_step(
    ckpt: &mut Checkpoint,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(KanacError::validation(format!("lr must be >= 0, got {lr}")));
    }
    for (name, t) in &ckpt.tensors {
        let g = grads.get(name)?;
        if g.len() != t.len() {
            return Err(KanacError::validation(format!(
                "gradient '{name}' has {} values, tensor has {}",
                g.len(),
                t.len()
            )));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(KanacError::Numeric {
                layer: None,
                msg: format!("non-finite gradient {bad} in '{name}'"),
            });
        }
    }

    let step = state.step + 1;
    let s = state.settings;
    let keep = 1.0 - s.weight_decay;
    for (name, t) in ckpt.tensors.iter_mut() {
        let g = grads.get(name)?;
        let m = state.m.get_mut(name).expect("moment mirrors tensor");
        let v = state.v.get_mut(name).expect("moment mirrors tensor");
        for i in 0..t.data.len() {
            let (m_new, v_new, update) = adam_scalar(m[i] as f64, v[i] as f64, g[i] as f64, step, &s);
            m[i] = m_new as f32;
            v[i] = v_new as f32;
            t.data[i] = (t.data[i] as f64 * keep - lr * update) as f32;
        }
    }
    state.step = step;
    Ok(())
}
