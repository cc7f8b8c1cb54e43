//! Diffusion reconstruction loss and the cross-attention statistics regularizer.

use serde::{Deserialize, Serialize};

use crate::attention::{pooled_stats_with, AttentionMapSet, Pooling, PooledStats, TokenRole};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the mean and variance gap terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
}

impl RegWeights {
    pub const ZERO: RegWeights = RegWeights { lambda_mu: 0.0, lambda_sigma: 0.0 };

    pub fn new(lambda_mu: f64, lambda_sigma: f64) -> Result<Self> {
        let w = Self { lambda_mu, lambda_sigma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mu", self.lambda_mu), ("lambda_sigma", self.lambda_sigma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_mu == 0.0 && self.lambda_sigma == 0.0
    }
}

/// Predicted and target noise of identical shape.
#[derive(Clone, Debug)]
pub struct NoisePair<'a> {
    pub predicted: &'a Tensor,
    pub target: &'a Tensor,
}

/// Mean squared error over every element.
pub fn diffusion_loss(pair: NoisePair<'_>) -> Result<f64> {
    pair.predicted.ensure_same_shape(pair.target)?;
    let n = pair.predicted.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pair.predicted.data().iter().zip(pair.target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegOutcome {
    pub loss: f64,
    pub concept: PooledStats,
    pub category: PooledStats,
    /// d loss / d value, laid out exactly like each layer's `values`.
    pub grads: Vec<Vec<f64>>,
}

/// Configured form of the regularizer, as used by the trainer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionRegularizer {
    pub weights: RegWeights,
    pub pooling: Pooling,
    /// Treat the category statistics as constants when differentiating.
    pub detach_category: bool,
}

impl AttentionRegularizer {
    pub fn new(weights: RegWeights) -> Self {
        Self { weights, pooling: Pooling::Concat, detach_category: false }
    }

    pub fn loss(&self, mapset: &AttentionMapSet) -> Result<(f64, PooledStats, PooledStats)> {
        let concept = role_stats(mapset, &TokenRole::Concept, self.pooling)?;
        let category = role_stats(mapset, &TokenRole::Category, self.pooling)?;
        let mean_gap = concept.mean - category.mean;
        let var_gap = concept.variance - category.variance;
        let loss = self.weights.lambda_mu * mean_gap * mean_gap + self.weights.lambda_sigma * var_gap * var_gap;
        Ok((loss, concept, category))
    }

    pub fn loss_and_grad(&self, mapset: &AttentionMapSet) -> Result<RegOutcome> {
        let (loss, concept, category) = self.loss(mapset)?;
        let v_pos = mapset.position_of(&TokenRole::Concept).expect("checked by loss");
        let c_pos = mapset.position_of(&TokenRole::Category).expect("checked by loss");
        let d_mean = 2.0 * self.weights.lambda_mu * (concept.mean - category.mean);
        let d_var = 2.0 * self.weights.lambda_sigma * (concept.variance - category.variance);

        let total: usize = mapset.layers.iter().map(|l| l.locations()).sum();
        let layer_count = mapset.layers.len() as f64;
        let mut grads: Vec<Vec<f64>> = mapset.layers.iter().map(|l| vec![0.0; l.values.len()]).collect();
        for (layer, grad) in mapset.layers.iter().zip(grads.iter_mut()) {
            // Each value's weight in the pooled mean, and the center its variance term uses.
            let (weight, center_v, center_c) = match self.pooling {
                Pooling::Concat => (1.0 / total as f64, concept.mean, category.mean),
                Pooling::PerLayerMean => {
                    let n = layer.locations() as f64;
                    let mean_of = |tok: usize| {
                        layer.values.iter().skip(tok).step_by(layer.num_tokens).sum::<f64>() / n
                    };
                    (1.0 / (layer_count * n), mean_of(v_pos), mean_of(c_pos))
                }
            };
            for loc in 0..layer.locations() {
                let base = loc * layer.num_tokens;
                let xv = layer.values[base + v_pos];
                grad[base + v_pos] += weight * (d_mean + d_var * 2.0 * (xv - center_v));
                if !self.detach_category {
                    let xc = layer.values[base + c_pos];
                    grad[base + c_pos] -= weight * (d_mean + d_var * 2.0 * (xc - center_c));
                }
            }
        }
        Ok(RegOutcome { loss, concept, category, grads })
    }
}

fn role_stats(mapset: &AttentionMapSet, role: &TokenRole, pooling: Pooling) -> Result<PooledStats> {
    pooled_stats_with(mapset, role, pooling).map_err(|e| match e {
        Error::UnknownTokenRole(r) => Error::MissingTokenRole(r),
        other => other,
    })
}

/// `λ_μ (μ_V − μ_cat)² + λ_σ (σ²_V − σ²_cat)²` over concatenated layer values.
pub fn attention_reg_loss(mapset: &AttentionMapSet, weights: RegWeights) -> Result<f64> {
    weights.validate()?;
    Ok(AttentionRegularizer::new(weights).loss(mapset)?.0)
}

pub fn total_loss(diffusion: f64, reg: f64) -> Result<f64> {
    if !diffusion.is_finite() || !reg.is_finite() {
        return Err(Error::NonFiniteLoss { stage: String::new(), step: 0, diffusion, reg });
    }
    Ok(diffusion + reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionRecord;

    fn mapset(v: &[f64], cat: &[f64]) -> AttentionMapSet {
        // One layer, n locations, three tokens: V, category, filler.
        let values = v
            .iter()
            .zip(cat)
            .flat_map(|(&a, &b)| [a, b, (1.0 - a - b).max(0.0)])
            .collect();
        AttentionMapSet {
            layers: vec![AttentionRecord::new(0, 1, v.len(), 3, values).unwrap()],
            token_index: vec![(TokenRole::Concept, 0), (TokenRole::Category, 1)],
            tokens: vec![],
        }
    }

    #[test]
    fn mse_trivial_cases() {
        let t = Tensor::new(vec![2, 2], vec![0.1, -0.4, 2.0, 3.5]).unwrap();
        assert_eq!(diffusion_loss(NoisePair { predicted: &t, target: &t }).unwrap(), 0.0);
        let shifted = t.map(|x| x + 1.0);
        assert_eq!(diffusion_loss(NoisePair { predicted: &shifted, target: &t }).unwrap(), 1.0);
    }

    #[test]
    fn mse_hand_oracle() {
        let p = Tensor::new(vec![2, 2], vec![0.5, -1.25, 2.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.75, 1.0, -0.5]).unwrap();
        // (0.25 + 4 + 1 + 0.25) / 4
        let got = diffusion_loss(NoisePair { predicted: &p, target: &t }).unwrap();
        assert!((got - 1.375).abs() < 1e-12);
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(diffusion_loss(NoisePair { predicted: &a, target: &b }), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn identical_collections_give_zero() {
        let ms = mapset(&[0.1, 0.4, 0.3], &[0.1, 0.4, 0.3]);
        assert_eq!(attention_reg_loss(&ms, RegWeights::new(2.0, 5.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn constant_fields_mean_gap() {
        let ms = mapset(&[0.5; 4], &[0.25; 4]);
        assert_eq!(attention_reg_loss(&ms, RegWeights::new(1.0, 0.0).unwrap()).unwrap(), 0.0625);
    }

    #[test]
    fn variance_gap() {
        let ms = mapset(&[0.0, 1.0], &[0.5, 0.5]);
        let got = attention_reg_loss(&ms, RegWeights::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(got, 0.0625);
    }

    #[test]
    fn missing_role() {
        let mut ms = mapset(&[0.5], &[0.25]);
        ms.token_index.retain(|(r, _)| *r != TokenRole::Category);
        assert!(matches!(
            attention_reg_loss(&ms, RegWeights::new(1.0, 1.0).unwrap()),
            Err(Error::MissingTokenRole(_))
        ));
    }

    #[test]
    fn weights_reject_negative_and_nan() {
        assert!(RegWeights::new(-0.1, 0.0).is_err());
        assert!(RegWeights::new(0.0, f64::NAN).is_err());
        assert!(RegWeights::new(0.1, 0.0).is_ok());
    }

    #[test]
    fn total_loss_adds_and_guards() {
        assert_eq!(total_loss(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(total_loss(0.0, 0.3).unwrap(), 0.3);
        assert_eq!(total_loss(0.5, 0.125).unwrap(), 0.625);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(Error::NonFiniteLoss { .. })));
        assert!(matches!(total_loss(0.0, f64::INFINITY), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn detached_category_has_no_gradient() {
        let ms = mapset(&[0.1, 0.6], &[0.3, 0.2]);
        let reg = AttentionRegularizer { detach_category: true, ..AttentionRegularizer::new(RegWeights::new(2.0, 5.0).unwrap()) };
        let out = reg.loss_and_grad(&ms).unwrap();
        assert!(out.grads[0].iter().skip(1).step_by(3).all(|&g| g == 0.0));
        assert!(out.grads[0].iter().step_by(3).any(|&g| g != 0.0));
    }
}
