//! Momentum SGD with selective weight decay.
//!
//! Update rule (coupled decay, fixed and documented):
//! `v <- momentum * v + (grad + wd * param)`, then `param <- param - lr * v`.
//! Weight decay applies only to parameters registered with the decay flag
//! (convolution weights); biases and affine parameters skip it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            epochs: 12,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers, index-aligned with the store.
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(ps: &ParamStore) -> Self {
        Self {
            velocity: ps.ids().map(|id| Tensor::zeros_like(ps.get(id))).collect(),
        }
    }
}

/// One optimizer step over every registered parameter.
pub fn sgd_step(
    ps: &mut ParamStore,
    gs: &GradStore,
    state: &mut SgdState,
    cfg: &TrainConfig,
) -> Result<()> {
    let ids: Vec<_> = ps.ids().collect();
    if state.velocity.len() != ids.len() {
        return Err(Error::Dimension(format!(
            "optimizer state has {} buffers for {} parameters",
            state.velocity.len(),
            ids.len()
        )));
    }
    for (k, id) in ids.into_iter().enumerate() {
        let grad = gs.get(id);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter '{}'",
                ps.name(id)
            )));
        }
        let wd = if ps.decays(id) { cfg.weight_decay } else { 0.0 };
        let v = &mut state.velocity[k];
        let param = ps.get_mut(id);
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(grad.iter()).zip(param.data_mut()) {
            *vi = cfg.momentum * *vi + (gi + wd * *pi);
            *pi -= cfg.lr * *vi;
        }
    }
    Ok(())
}
