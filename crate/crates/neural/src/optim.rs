use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |id| Tensor::zeros(store.value(id).shape());
        Self {
            config,
            step: 0,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`, touching
    /// only `trainable` parameters (all when `None`). Gradients are checked
    /// for finiteness before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, trainable: Option<&[ParamId]>) -> Result<()> {
        let all: Vec<ParamId> = store.ids().collect();
        let ids = trainable.unwrap_or(&all);
        if let Some(bad) = ids.iter().find(|id| !store.grad(**id).is_finite()) {
            return Err(NeuralError::NonFiniteGradient(store.name(*bad).to_string()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let wd = T::of(c.weight_decay);
        let eps = T::of(c.eps);
        for &id in ids {
            let grad = store.grad(id).data().to_vec();
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}
