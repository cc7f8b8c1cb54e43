//! Adam, applied to named parameter slices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam over named slices, with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig, lr: f64) -> Self {
        Self { config, lr, t: 0, moments: BTreeMap::new() }
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, key: &str, params: &mut [f64], grads: &[f64]) {
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; params.len()], vec![0.0; params.len()]));
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i] + weight_decay * params[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            params[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::default(), 0.1);
        let mut p = vec![1.0, -1.0, 0.0];
        adam.begin_step();
        adam.update("p", &mut p, &[3.0, -0.5, 0.0]);
        // Bias-corrected first step is lr * g / (|g| + eps).
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
        assert_eq!(p[2], 0.0);
    }
}
