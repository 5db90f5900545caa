use serde::{Deserialize, Serialize};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n: usize) -> Self {
        AdamW { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One update. A zero learning rate leaves `params` untouched bit for bit
    /// (moments still advance).
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.cfg.eps as f32;
        let decay = (lr * self.cfg.weight_decay) as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let denom = (self.v[i] * inv_bc2).sqrt() + eps;
            params[i] -= step * self.m[i] / denom + decay * params[i];
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warm-up from 0, then linear decay reaching 0 after the last step.
    #[default]
    LinearDecay,
}

impl LrSchedule {
    /// Learning rate at 0-based `step` of `total` steps.
    pub fn lr_at(self, base: f64, step: usize, warmup: usize, total: usize) -> f64 {
        match self {
            LrSchedule::LinearDecay => {
                if step < warmup {
                    base * step as f64 / warmup as f64
                } else {
                    base * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
                }
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before and after clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> (f64, f64) {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    let after = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    (norm, after)
}
