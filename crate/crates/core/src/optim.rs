//! AdamW with decoupled weight decay and per-parameter learning rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbones::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First and second moments per parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW step on every path with a gradient and a learning rate.
///
/// The decay `θ ← θ(1 - lr·wd)` is applied before the moment update. All
/// gradients are checked for finiteness before any weight changes.
pub fn adamw_step(
    weights: &mut ModelWeights,
    grads: &BTreeMap<String, Tensor>,
    lrs: &BTreeMap<String, f64>,
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (path, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(path.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (path, g) in grads {
        let Some(&lr) = lrs.get(path) else {
            continue;
        };
        let w = weights.get_mut(path)?;
        if w.shape() != g.shape() {
            return Err(Error::shape("adamw_step", format!("`{path}`: {:?} vs {:?}", w.shape(), g.shape())));
        }
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *wi -= lr * cfg.weight_decay * *wi;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
