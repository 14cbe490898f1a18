//! Adam with bias correction and the exponential learning-rate decay used for
//! object colours.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
#[error("shape mismatch: {params} parameters, {grad} gradients, {state} moments")]
pub struct ShapeMismatch {
    pub params: usize,
    pub grad: usize,
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut [T], grad: &[T], lr: T) -> Result<(), ShapeMismatch> {
    if params.len() != grad.len() || params.len() != state.len() {
        return Err(ShapeMismatch {
            params: params.len(),
            grad: grad.len(),
            state: state.len(),
        });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let one = T::one();
    let step = state.step as i32;
    let bc1 = one - b1.powi(step);
    let bc2 = one - b2.powi(step);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// `lr(k) = initial · γᵏ` with `γ` chosen so that `lr(total) = initial · final_fraction`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialDecay {
    pub initial: f64,
    pub gamma: f64,
}

impl ExponentialDecay {
    pub fn to_fraction(initial: f64, final_fraction: f64, total_steps: u64) -> Self {
        let gamma = if total_steps == 0 {
            1.0
        } else {
            final_fraction.powf(1.0 / total_steps as f64)
        };
        Self { initial, gamma }
    }

    pub fn at(&self, step: u64) -> f64 {
        self.initial * self.gamma.powf(step as f64)
    }
}
