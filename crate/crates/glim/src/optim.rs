//! AdamW with bias correction, inverse-square-root LR schedule, and global
//! gradient-norm clipping. Moment arithmetic runs in f64 regardless of the
//! parameter precision; updates are applied in insertion order, so a step is
//! deterministic.

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("learning-rate schedule is defined for steps >= 1")]
    StepZero,
    #[error("non-finite gradient in tensor {name}")]
    NonFiniteGradient { name: String },
    #[error("gradient layout does not match parameter store")]
    LayoutMismatch,
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators, index-aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_store<S: Scalar>(store: &ParamStore<S>) -> Self {
        AdamState {
            m: store.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
        }
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `peak · step/warmup` through warmup, then `peak · sqrt(warmup/step)`.
pub fn lr_schedule(peak_lr: f64, warmup_steps: u64, step: u64) -> Result<f64, OptimError> {
    if step == 0 {
        return Err(OptimError::StepZero);
    }
    let warmup = warmup_steps.max(1);
    if step <= warmup {
        Ok(peak_lr * step as f64 / warmup as f64)
    } else {
        Ok(peak_lr * (warmup as f64 / step as f64).sqrt())
    }
}

/// One AdamW step: bias-corrected moments, decoupled weight decay
/// (`lr · decay · param` subtracted separately from the moment update).
/// Any non-finite gradient aborts before touching the parameters.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[Vec<S>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    if grads.len() != store.len() {
        return Err(OptimError::LayoutMismatch);
    }
    for (param, grad) in store.params().iter().zip(grads) {
        if grad.len() != param.data.len() {
            return Err(OptimError::LayoutMismatch);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { name: param.name.clone() });
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (idx, param) in store.params_mut().iter_mut().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..param.data.len() {
            let g = grads[idx][i].to_f64();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p = param.data[i].to_f64();
            let update = lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * p;
            param.data[i] = S::from_f64(p - update);
        }
    }
    Ok(())
}

/// Scales all gradients down so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = S::from_f64(v.to_f64() * scale);
            }
        }
    }
    norm
}
