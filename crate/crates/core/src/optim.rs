//! Learning-rate schedule, gradient clipping and the AdamW update.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Linear warmup followed by step decay at fixed epoch boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub warmup_iters: usize,
    pub warmup_start_factor: f64,
    pub iters_per_epoch: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub backbone_multiplier: f64,
}

impl LrSchedule {
    pub fn epoch_of(&self, iter: usize) -> usize {
        (iter as f64 / self.iters_per_epoch).floor() as usize
    }

    /// Learning-rate multiplier relative to `base_lr` for the head group.
    pub fn multiplier(&self, iter: usize) -> f64 {
        let epoch = self.epoch_of(iter);
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        let step = self.decay_factor.powi(decays as i32);
        let warm = if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            self.warmup_start_factor + (1.0 - self.warmup_start_factor) * t
        } else {
            1.0
        };
        warm * step
    }

    pub fn group_multiplier(&self, iter: usize, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.multiplier(iter) * self.backbone_multiplier,
            ParamGroup::Head => self.multiplier(iter),
        }
    }
}

pub fn build_lr_schedule(config: &ExperimentConfig, total_iters: usize) -> Result<LrSchedule> {
    if total_iters < config.warmup_iters {
        return Err(Error::Config(format!(
            "total iterations {total_iters} shorter than warmup {}",
            config.warmup_iters
        )));
    }
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be > 0".into()));
    }
    if let Some(e) = config.lr_decay_epochs.iter().find(|&&e| e >= config.epochs) {
        return Err(Error::Config(format!("decay epoch {e} >= epochs {}", config.epochs)));
    }
    Ok(LrSchedule {
        warmup_iters: config.warmup_iters,
        warmup_start_factor: config.warmup_start_factor,
        iters_per_epoch: (total_iters as f64 / config.epochs as f64).max(1.0),
        decay_epochs: config.lr_decay_epochs.clone(),
        decay_factor: config.lr_decay_factor,
        backbone_multiplier: config.backbone_lr_multiplier,
    })
}

/// Rescales `grads` to L2 norm `max_norm` when it is larger; zero passes through.
pub fn clip_gradients(grads: &[f64], max_norm: f64) -> Vec<f64> {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm <= max_norm {
        return grads.to_vec();
    }
    let s = max_norm / norm;
    grads.iter().map(|g| g * s).collect()
}

/// In-place global-norm clipping across all parameter gradients. Returns the pre-clip norm.
pub fn clip_param_grads(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in &mut grads.grads {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(&p.value.shape)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `lr_of` gives the learning rate for a parameter group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr_of: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.group)).collect();
        for (id, group) in ids {
            let lr = lr_of(group);
            let g = &grads.grads[id.0].data;
            let m = &mut self.m[id.0].data;
            let v = &mut self.v[id.0].data;
            let p = &mut store.value_mut(id).data;
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * self.weight_decay * p[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}
