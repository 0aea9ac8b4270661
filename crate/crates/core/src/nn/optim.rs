use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter step counts, so parameter groups updated at
/// different phases keep independent bias corrections.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
    pub(crate) steps: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Updates the parameters listed in `allowed` that received a gradient.
    /// Parameters without a gradient are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<ParamId, Tensor<T>>, allowed: &[ParamId]) {
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(self.config.eps);
        for &id in allowed {
            let Some(g) = grads.get(&id) else { continue };
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let step_size = T::lit(self.config.lr / (1.0 - b1.powi(t)));
            let bc2 = T::lit(1.0 - b2.powi(t));
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = tb1 * m[k] + (T::one() - tb1) * gk;
                v[k] = tb2 * v[k] + (T::one() - tb2) * gk * gk;
                p[k] -= step_size * m[k] / ((v[k] / bc2).sqrt() + eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>], &[u64]) {
        (&self.m, &self.v, &self.steps)
    }

    pub fn from_parts(config: AdamConfig, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, steps: Vec<u64>) -> Self {
        Adam { config, m, v, steps }
    }
}
