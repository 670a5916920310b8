use crate::model::TransformerModel;
use crate::tensor::{Scalar, Tensor};

use super::{GradientSet, TrainConfig};

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &TransformerModel<T>) -> Self {
        let zeros: Vec<Tensor<T>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, model: &mut TransformerModel<T>, grads: &GradientSet<T>, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let params = model.params_mut();
        let grads = grads.tensors();
        assert_eq!(params.len(), grads.len(), "gradient set does not match model");
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, cfg, lr);
        }
    }
}

/// Adam on flat slices; `t` is the 1-based step count.
pub fn adam_update<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &TrainConfig, lr: f64) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let step = T::of(lr / c1);
    let c2 = T::of(c2);
    let eps = T::of(cfg.eps);
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        params[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
    }
}
