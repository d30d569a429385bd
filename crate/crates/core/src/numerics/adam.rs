use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments for `size` scalar parameters.
    pub fn new(size: usize, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            step: 0,
            m: vec![0.0; size],
            v: vec![0.0; size],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Multiply the learning rate by `factor` in (0, 1].
    pub fn decay_lr(&mut self, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::contract(format!(
                "learning-rate decay factor must lie in (0, 1], got {factor}"
            )));
        }
        self.lr *= factor;
        Ok(())
    }
}

/// One bias-corrected Adam update over `params`, in order.
///
/// `grads[i]` must have the same length as `params[i]`, and the total length
/// must equal the state's moment length.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total != state.m.len() {
        return Err(Error::contract(format!(
            "optimizer state covers {} values, parameters have {total}",
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let mut off = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        let m = &mut state.m[off..off + g.len()];
        let v = &mut state.v[off..off + g.len()];
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        off += g.len();
    }
    Ok(())
}
