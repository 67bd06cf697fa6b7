//! Adam with bias correction. Moments are public so checkpoints can store them.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of steps taken.
    pub t: u64,
}

impl Adam {
    pub fn new(ps: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = ps.tensors().iter().map(|t| alloc::vec![0.0; t.values.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Whether the moment buffers line up with `ps`.
    pub fn matches(&self, ps: &ParamSet) -> bool {
        self.m.len() == ps.len()
            && self.v.len() == ps.len()
            && ps.tensors().iter().zip(&self.m).zip(&self.v).all(|((t, m), v)| {
                m.len() == t.values.len() && v.len() == t.values.len()
            })
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &Grads, lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        for (((p, g), m), v) in ps.tensors_mut().iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.values.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
        }
    }
}
