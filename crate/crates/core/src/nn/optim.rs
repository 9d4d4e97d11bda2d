//! Adam with bias correction and the epoch-based learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Epoch schedule: `min(warmup_rate * tau / warmup_divisor, base)` for
/// `tau <= decay_after`, then `decay * base`. `tau` is the 1-based epoch.
///
/// With the default constants the warm-up term `2.5e-4 * tau` already
/// exceeds the cap at `tau = 1`, so the rate is flat at `1e-4` until the
/// decay. `warmup_divisor` exists to make the warm-up observable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_rate: f64,
    pub warmup_divisor: f64,
    pub base: f64,
    pub decay: f64,
    pub decay_after: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_rate: 2.5e-4,
            warmup_divisor: 1.0,
            base: 1e-4,
            decay: 0.1,
            decay_after: 8,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        assert!(epoch >= 1, "epochs are 1-based");
        if epoch <= self.decay_after {
            (self.warmup_rate * epoch as f64 / self.warmup_divisor).min(self.base)
        } else {
            self.decay * self.base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        assert_eq!(self.first.len(), store.len(), "optimizer/store mismatch");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (val, grad) = (p.value.data_mut(), p.grad.data());
            for (((w, g), m), v) in val
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
