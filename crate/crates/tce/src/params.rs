//! Named parameter storage with per-parameter ADAM state.

use crate::error::{Result, TceError};
use crate::graph::{BnUpdate, Gradients};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// First/second moment estimates and step count for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: Tensor,
    pub second: Tensor,
    pub steps: u64,
}

/// ADAM hyperparameters. The conventional defaults; only the learning rate is
/// usually overridden from the run config.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.0005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), both keyed by name. Iteration order is sorted, which keeps
/// optimizer sweeps and checkpoint bytes deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    adam: BTreeMap<String, AdamState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(TceError::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(TceError::Config(format!("duplicate buffer name {name}")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| TceError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| TceError::UnknownParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| TceError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// One ADAM update with bias correction over every parameter. Parameters
    /// absent from `grads` are treated as having zero gradient: their moments
    /// still decay, so momentum keeps drifting them until it dies out.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (name, value) in self.params.iter_mut() {
            let grad = grads.get_or_zeros(name, value.shape());
            if grad.shape() != value.shape() {
                return Err(TceError::Shape {
                    op: "adam_step",
                    detail: format!(
                        "gradient {:?} vs parameter {:?} for {name}",
                        grad.shape(),
                        value.shape()
                    ),
                });
            }
            let state = self.adam.entry(name.clone()).or_insert_with(|| AdamState {
                first: Tensor::zeros(value.shape()),
                second: Tensor::zeros(value.shape()),
                steps: 0,
            });
            state.steps += 1;
            let t = state.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let m = state.first.data_mut();
            let v = state.second.data_mut();
            let p = value.data_mut();
            for ((pi, mi), (vi, gi)) in
                p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(grad.data()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Fold train-mode batch statistics into the running buffers:
    /// `r <- (1 - momentum) * r + momentum * batch_stat`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) -> Result<()> {
        for u in updates {
            for (suffix, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let name = format!("{}.{}", u.prefix, suffix);
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| TceError::UnknownParam(name.clone()))?;
                for (r, s) in buf.data_mut().iter_mut().zip(stat) {
                    *r = (1.0 - momentum) * *r + momentum * s;
                }
            }
        }
        Ok(())
    }
}
