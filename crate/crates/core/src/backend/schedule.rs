use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Discrete DDPM noise schedule with precomputed cumulative products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("noise schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("alpha-bar must be strictly decreasing".into()));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Betas spaced linearly from `start` to `end` inclusive.
    pub fn linear(start: f64, end: f64, steps: usize) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![start],
            n => (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect(),
        };
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::TimestepOutOfRange { t, steps: self.steps() })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `z_t = sqrt(ᾱ_t) z_0 + sqrt(1 − ᾱ_t) ε`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    z0.ensure_same_shape(eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}
