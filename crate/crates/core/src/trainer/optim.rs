//! Adam with decoupled weight decay and a linear warmup/decay schedule.

use crate::autodiff::{Gradients, ParamStore, Tensor};

/// Learning rate for the 0-based update `step`: linear warmup over
/// `warmup` steps to `base`, then linear decay reaching zero after `total`.
pub fn learning_rate(base: f64, warmup: u64, total: u64, step: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    let up = if warmup == 0 { 1.0 } else { (step + 1) as f64 / warmup as f64 };
    let down = (total - step) as f64 / (total - warmup.min(total)).max(1) as f64;
    base * up.min(down).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Absent gradients count as zero. Weight decay is
    /// decoupled from the moments and applies to matrices only.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.value.shape().len() == 2 { c.weight_decay } else { 0.0 };
            let g = g.map(Tensor::data);
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *x);
            }
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
