//! AdamW and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{NamedParams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: NamedParams,
    pub v: NamedParams,
}

impl OptimizerState {
    pub fn new(params: &NamedParams, config: AdamConfig) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
///
/// Gradients are checked for finiteness before anything is mutated.
pub fn adamw_step(params: &mut NamedParams, grads: &NamedParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        let p = params.get(name).ok_or_else(|| Error::usage(format!("gradient for unknown parameter `{name}`")))?;
        if p.dims() != g.dims() {
            return Err(Error::shape("adamw_step", format!("`{name}`: param {:?} vs grad {:?}", p.dims(), g.dims())));
        }
    }
    let AdamConfig { beta1, beta2, eps, weight_decay } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(p.dims()));
            state.v.insert(name, Tensor::zeros(p.dims()));
        }
        let m = state.m.get_mut(name).expect("moment");
        for (mi, gi) in m.values_mut().iter_mut().zip(g.values()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("moment");
        for (vi, gi) in v.values_mut().iter_mut().zip(g.values()) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(name).expect("moment"), state.v.get(name).expect("moment"));
        for ((pi, mi), vi) in p.values_mut().iter_mut().zip(m.values()).zip(v.values()) {
            let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
            *pi -= lr * (update + weight_decay * *pi);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut NamedParams, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::usage(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}
