use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Float, NnError, Param};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every parameter, in the order parameters are passed
/// to [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update using the gradients stored in `params`.
/// Moment buffers are allocated on the first call.
pub fn adam_step<F: Float>(params: &mut [&mut Param<F>], state: &mut AdamState<F>) -> Result<(), NnError> {
    if state.m.is_empty() && state.step == 0 {
        state.m = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NnError::Shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {i}: value {:?}, grad {:?}, moments {:?}",
                p.value.shape(),
                p.grad.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::of(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = F::of(1.0 / (1.0 - cfg.beta2.powi(t)));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.epsilon));
    for ((p, m), v) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let Param { value, grad } = &mut **p;
        Zip::from(value)
            .and(&*grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
