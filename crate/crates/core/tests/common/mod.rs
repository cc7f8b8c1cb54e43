//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use attndb::attention::{AttentionMapSet, AttentionRecord, TokenRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random softmax-normalized map set: 1..=4 square layers of side 2..=8, shared token count 3..=10.
pub fn random_mapset(rng: &mut impl Rng) -> AttentionMapSet {
    let tokens = rng.random_range(3..=10);
    let n_layers = rng.random_range(1..=4);
    let layers = (0..n_layers)
        .map(|id| {
            let side = rng.random_range(2..=8);
            let mut values = Vec::with_capacity(side * side * tokens);
            for _ in 0..side * side {
                let logits: Vec<f64> = (0..tokens).map(|_| rng.random_range(-3.0..3.0)).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                values.extend(logits.iter().map(|l| l.exp() / z));
            }
            AttentionRecord::new(id, side, side, tokens, values).unwrap()
        })
        .collect();
    let v = rng.random_range(0..tokens - 1);
    let c = v + 1;
    AttentionMapSet {
        layers,
        token_index: vec![(TokenRole::Concept, v), (TokenRole::Category, c)],
        tokens: Vec::new(),
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every value one token takes, all layers flattened end to end.
pub fn flatten_token(set: &AttentionMapSet, token: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &set.layers {
        for loc in 0..layer.height * layer.width {
            out.push(layer.values[loc * layer.num_tokens + token]);
        }
    }
    out
}

/// Two-pass mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Regularizer value computed from flattened populations.
pub fn reg_oracle(set: &AttentionMapSet, lambda_mu: f64, lambda_sigma: f64) -> f64 {
    let v = set.position_of(&TokenRole::Concept).unwrap();
    let c = set.position_of(&TokenRole::Category).unwrap();
    let (mv, vv) = mean_var(&flatten_token(set, v));
    let (mc, vc) = mean_var(&flatten_token(set, c));
    lambda_mu * (mv - mc).powi(2) + lambda_sigma * (vv - vc).powi(2)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
