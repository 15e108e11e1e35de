//! Shared fixtures and the finite-difference oracle used by the
//! integration suites.
#![allow(dead_code)] // each test binary uses a different subset

use oolab::data::TaskSpec;
use oolab::models::ModelDims;
use oolab::nn::ParamSet;
use oolab::tensor::Tensor;

/// A small 3-modality, 4-class task.
pub fn small_task(seed: u64) -> TaskSpec {
    TaskSpec {
        modalities: 3,
        classes: 4,
        latent_dim: 6,
        private_dim: 3,
        input_dims: vec![10, 10, 10],
        redundancy: 0.9,
        noise_sigma: 0.1,
        n_train: 256,
        n_test: 128,
        seed,
        shared_mixing: false,
    }
}

pub fn small_dims() -> ModelDims {
    ModelDims {
        feature_dim: 8,
        extractor_hidden: 12,
        tail_hidden: 10,
        expert_hidden: 10,
        fused_dim: 8,
        detector_hidden: 12,
    }
}

/// Central finite difference of `loss(params)` w.r.t. one entry of one
/// parameter tensor.
pub fn central_difference(
    params: &ParamSet,
    name: &str,
    index: usize,
    h: f64,
    loss: &dyn Fn(&ParamSet) -> f64,
) -> f64 {
    let base = params.get(name).unwrap().clone();
    let mut plus = params.clone();
    let mut values = base.values().to_vec();
    values[index] += h;
    plus.set(name, Tensor::new(base.shape().to_vec(), values.clone()).unwrap())
        .unwrap();
    let mut minus = params.clone();
    values[index] -= 2.0 * h;
    minus
        .set(name, Tensor::new(base.shape().to_vec(), values).unwrap())
        .unwrap();
    (loss(&plus) - loss(&minus)) / (2.0 * h)
}

/// Max relative error between an analytic gradient map and central finite
/// differences, probing every entry of every parameter.
pub fn max_relative_grad_error(
    params: &ParamSet,
    grads: &std::collections::BTreeMap<String, Vec<f64>>,
    loss: &dyn Fn(&ParamSet) -> f64,
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, grad) in grads {
        for (idx, &analytic) in grad.iter().enumerate() {
            let fd = central_difference(params, name, idx, h, loss);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((fd - analytic).abs() / denom);
        }
    }
    worst
}

