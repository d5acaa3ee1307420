//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Moment buffers for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub params: Vec<ParamId>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, config: AdamWConfig) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|&p| vec![0.0; store.get(p).numel()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
            params,
        }
    }

    /// All parameters of a store.
    pub fn for_all(store: &ParamStore, config: AdamWConfig) -> Self {
        Self::new(store, store.ids().collect(), config)
    }

    /// One update at learning rate `lr` (overrides `config.lr` for
    /// scheduled training). Every managed parameter must hold a gradient.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for &p in &self.params {
            if store.get(p).grad().is_none() {
                return Err(TensorError::MissingGrad(store.name(p).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, &p) in self.params.iter().enumerate() {
            let decay = if store.decays(p) { c.weight_decay } else { 0.0 };
            let tensor = store.get_mut(p);
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * decay * data[j];
                data[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(store, lr)
    }
}
