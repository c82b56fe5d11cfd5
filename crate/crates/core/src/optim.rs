//! Adam with per-group learning rates and global gradient-norm clipping.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Matrix, ParamId};
use crate::error::{Error, Result};
use crate::model::{ParamGroup, SamplerModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub drift_lr: f64,
    pub flow_lr: f64,
    pub logz_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            drift_lr: 1e-3,
            flow_lr: 1e-2,
            logz_lr: 1e-1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(10.0),
        }
    }
}

impl AdamConfig {
    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Drift => self.drift_lr,
            ParamGroup::Flow => self.flow_lr,
            ParamGroup::LogZ => self.logz_lr,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    step: i32,
    moments: HashMap<ParamId, (Matrix, Matrix)>,
}

/// Euclidean norm of all gradient entries together.
pub fn global_norm(grads: &Gradients) -> f64 {
    let mut entries: Vec<(&ParamId, &Matrix)> = grads.iter().collect();
    // Fixed summation order keeps the norm bit-stable across runs.
    entries.sort_by_key(|(id, _)| **id);
    entries.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: HashMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update and returns the gradient norm before clipping.
    /// Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, model: &mut SamplerModel, grads: &Gradients) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteValue("gradient"));
        }
        let norm = global_norm(grads);
        let scale = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (group, p) in model.params_mut() {
            if !grads.contains(p.id) {
                continue;
            }
            let g = grads.get(p.id)? * scale;
            let (m, v) = self
                .moments
                .entry(p.id)
                .or_insert_with(|| (Matrix::zeros(p.value.dim()), Matrix::zeros(p.value.dim())));
            let lr = c.lr(group);
            ndarray::Zip::from(&mut p.value).and(m).and(v).and(&g).for_each(|w, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            });
        }
        Ok(norm)
    }
}
