use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, warmup_steps: 0, clip_norm: Some(1.0) }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w > 0 && self.step < w {
            self.config.lr * (self.step + 1) as f64 / w as f64
        } else {
            self.config.lr
        }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> f64 {
        let norm = grads.global_norm();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        for i in 0..params.len() {
            let Some(g) = grads.get(i) else { continue };
            let p = params.by_index_mut(i);
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            for j in 0..p.data.len() {
                let gj = g.data[j] * clip;
                m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
                v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
                let update = (m.data[j] / bc1) / ((v.data[j] / bc2).sqrt() + self.config.eps);
                p.data[j] -= lr * (update + self.config.weight_decay * p.data[j]);
            }
        }
        norm
    }
}
