//! Stochastic gradient descent with momentum and coupled weight decay.
//!
//! The update is the classic momentum form with decay folded into the
//! gradient: `v <- momentum*v + grad + weight_decay*param` followed by
//! `param <- param - lr*v`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::validation(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight_decay must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers, created lazily on first update.
#[derive(Debug, Default, Clone)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// Scale the whole gradient map so its global l2 norm is at most `max_norm`.
pub fn clip_grads(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let total: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / total;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Apply one SGD step to every named gradient. Parameters without a gradient
/// entry are left untouched, which is how frozen subnetworks stay frozen.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut SgdState,
    cfg: &SgdConfig,
) -> Result<()> {
    cfg.validate()?;
    for (name, grad) in grads {
        let current = params.get(name)?;
        if current.numel() != grad.len() {
            return Err(Error::shape(
                "sgd_update",
                format!(
                    "{name}: {} gradient entries for {} parameters",
                    grad.len(),
                    current.numel()
                ),
            ));
        }
        let shape = current.shape().to_vec();
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let mut next = Vec::with_capacity(grad.len());
        for ((vi, gi), pi) in v.iter_mut().zip(grad).zip(current.values()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * pi;
            next.push(pi - cfg.lr * *vi);
        }
        params.set(name, Tensor::new(shape, next)?)?;
    }
    Ok(())
}
