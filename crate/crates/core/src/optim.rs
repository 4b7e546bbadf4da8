//! AdamW with decoupled weight decay and the one-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

pub const PCT_START: f64 = 0.3;
pub const INITIAL_DIV: f64 = 25.0;
pub const FINAL_DIV: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[Mat<T>]) -> Self {
        let z: Vec<Mat<T>> = params
            .iter()
            .map(|p| Mat::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

/// One update. Tensors with `decay[i] == false` skip weight decay.
pub fn adamw_step<T: Real>(
    params: &mut [Mat<T>],
    grads: &[Mat<T>],
    decay: &[bool],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("optimizer tensor count mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let shrink = T::c(1.0 - lr * cfg.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if !g.same_shape(p) {
            return Err(Error::shape(format!("gradient {i} shape mismatch")));
        }
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (k, pv) in p.as_mut_slice().iter_mut().enumerate() {
            let gv = g.as_slice()[k];
            if decay[i] {
                *pv *= shrink;
            }
            m[k] = b1 * m[k] + (T::one() - b1) * gv;
            v[k] = b2 * v[k] + (T::one() - b2) * gv * gv;
            let mhat = m[k].f64() / bc1;
            let vhat = v[k].f64() / bc2;
            *pv -= T::c(lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// Cosine warmup from `max_lr/25` to `max_lr` over the first 30% of steps,
/// then cosine anneal to `max_lr/1000`.
pub fn one_cycle_lr(step: usize, total: usize, max_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Schedule { step, total });
    }
    let initial = max_lr / INITIAL_DIV;
    let last = max_lr / FINAL_DIV;
    let peak = PCT_START * total as f64;
    let s = step as f64;
    if s == peak {
        return Ok(max_lr);
    }
    Ok(if s < peak {
        initial + (max_lr - initial) * (1.0 - (PI * s / peak).cos()) / 2.0
    } else {
        last + (max_lr - last) * (1.0 + (PI * (s - peak) / (total as f64 - peak)).cos()) / 2.0
    })
}
