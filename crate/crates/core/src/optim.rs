//! AdamW with decoupled weight decay, and the poly learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers, one pair per parameter, plus the shared
/// step counter.
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        AdamState { m, v, step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OptimError {
    GradShapeMismatch { param: usize, expected: usize, got: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::GradShapeMismatch { param, expected, got } => write!(
                f,
                "grad length {got} does not match param {param} length {expected}"
            ),
        }
    }
}

/// One bias-corrected Adam update plus the decoupled decay term
/// `lr * weight_decay * param`. `grads` is indexed like the store.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &[Vec<f32>],
    lr: f32,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::powf(cfg.beta1, t as f32);
    let bc2 = 1.0 - libm::powf(cfg.beta2, t as f32);
    for (idx, (_, p)) in store.iter_mut().enumerate() {
        let g = &grads[idx];
        if g.len() != p.data.len() {
            return Err(OptimError::GradShapeMismatch {
                param: idx,
                expected: p.data.len(),
                got: g.len(),
            });
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= lr * (mhat / (libm::sqrtf(vhat) + cfg.eps) + cfg.weight_decay * p.data[i]);
        }
    }
    Ok(())
}

/// `base_lr * (1 - iter/max_iter)^power`, clamped to 0 past `max_iter`.
pub fn poly_lr(base_lr: f32, iter: u64, max_iter: u64, power: f32) -> f32 {
    if iter >= max_iter {
        return 0.0;
    }
    let frac = 1.0 - iter as f32 / max_iter as f32;
    base_lr * libm::powf(frac, power)
}
