//! First-order optimizers over a model's parameter list.

use ferd_autograd::{Gradients, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FerdError, Result};
use crate::model_zoo::{Bound, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Collect per-parameter gradients for a bound model; parameters the loss
/// does not reach get `None`.
pub fn collect_grads(grads: &Gradients, bound: &Bound) -> Vec<Option<Tensor>> {
    bound.vars().iter().map(|&v| grads.get(v).cloned()).collect()
}

fn check_finite(grads: &[Option<Tensor>]) -> Result<()> {
    if grads.iter().flatten().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(FerdError::Numerical("non-finite gradient".into()))
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    lr: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model, config: SgdConfig) -> Self {
        Self {
            lr: config.lr,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            config,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn state(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn load_state(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(FerdError::Input("SGD state does not match the model".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Option<Tensor>]) -> Result<()> {
        check_finite(grads)?;
        let SgdConfig { momentum, weight_decay, .. } = self.config;
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gi + weight_decay * *w;
                *vi = momentum * *vi + d;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.t, &self.m, &self.v)
    }

    pub fn load_state(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let ok = |xs: &[Tensor]| xs.len() == self.m.len() && xs.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape());
        if !ok(&m) || !ok(&v) {
            return Err(FerdError::Input("Adam state does not match the model".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Option<Tensor>]) -> Result<()> {
        check_finite(grads)?;
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at epoch 0 towards 0 at `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}
