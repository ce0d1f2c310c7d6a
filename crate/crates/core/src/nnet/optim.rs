use serde::{Deserialize, Serialize};

/// Inverse-square-root schedule with linear warmup:
/// `lr = base · min(step / warmup, sqrt(warmup / step))`, and 0 at step 0.
pub fn lr_at(step: u64, base: f64, warmup: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let s = step as f64;
    if warmup == 0 {
        return base;
    }
    let w = warmup as f64;
    base * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, epsilon: 1e-8 }
    }
}

/// Adam moments. Frozen coordinates keep their moments untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, size: usize) -> Adam {
        Adam { config, step: 0, m: vec![0.0; size], v: vec![0.0; size] }
    }

    /// One bias-corrected update. `frozen[i]` skips coordinate `i`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, frozen: Option<&[bool]>) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + epsilon);
        }
    }
}
