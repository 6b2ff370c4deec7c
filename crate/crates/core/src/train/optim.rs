//! Adam optimizer and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::net::Parameters;

pub const POLY_EXPONENT: f64 = 0.9;

/// `lr0 * (1 - epoch / max_epochs)^0.9`, reaching 0 at `max_epochs`.
pub fn poly_lr(lr0: f64, epoch: usize, max_epochs: usize) -> f64 {
    if max_epochs == 0 {
        return lr0;
    }
    let frac = (1.0 - epoch as f64 / max_epochs as f64).max(0.0);
    lr0 * frac.powf(POLY_EXPONENT)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Parameters,
    pub v: Parameters,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Parameters) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.tensors.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v.get_mut(name);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let m = self.m.get(name);
            let v = self.v.get(name);
            for ((pi, mi), vi) in p.data.iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
