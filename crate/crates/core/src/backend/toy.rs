//! Miniature latent denoiser for CPU-scale runs.
//!
//! Layout of the network (channel-major activations, `P = resolution²`):
//!
//! ```text
//! text:  ctx_j = tanh(W_tok e_j + W_ctx mean(e) + pos_j)         (frozen)
//! in:    h = W_in z + b_in + W_time temb(t)
//! block: x = avgpool(h, 2^i)
//!        A = softmax_j((W_q x)·(W_k ctx_j) / sqrt(d_head))       (tapped)
//!        h = h + upsample(W_o (A · W_v ctx) + b_o)
//!        h = h + W_2 silu(W_1 h + b_1) + b_2
//! out:   ε̂ = W_out h + b_out
//! ```
//!
//! Gradients are computed by hand; the text encoder is differentiated so the
//! placeholder embedding row can be trained through it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{group_of, ParamStore};
use super::schedule::NoiseSchedule;
use super::tokenizer::{toy_vocabulary, TokenId, Tokenizer};
use super::{groups, Conditioning, DenoiseBatch, DiffusionBackend, StepGradients, TOKEN_EMBEDDINGS};
use crate::attention::{AttentionMapSet, AttentionRecord, AttentionTap, LayerGeometry};
use crate::error::{Error, Result};
use crate::objectives::AttentionRegularizer;
use crate::data::{preprocess, synthetic_images};
use crate::optim::{Adam, AdamConfig};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub latent_channels: usize,
    pub resolution: usize,
    pub hidden_channels: usize,
    pub ff_mult: usize,
    pub token_dim: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub cross_attention_blocks: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Generic denoising steps run by [`toy_backend`] before any personalization.
    pub pretrain_steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            resolution: 16,
            hidden_channels: 8,
            ff_mult: 2,
            token_dim: 16,
            attention_dim: 16,
            heads: 1,
            cross_attention_blocks: 2,
            vocab_size: 64,
            max_tokens: 16,
            time_dim: 16,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            pretrain_steps: DEFAULT_PRETRAIN_STEPS,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("resolution", self.resolution),
            ("hidden_channels", self.hidden_channels),
            ("ff_mult", self.ff_mult),
            ("token_dim", self.token_dim),
            ("attention_dim", self.attention_dim),
            ("heads", self.heads),
            ("cross_attention_blocks", self.cross_attention_blocks),
            ("max_tokens", self.max_tokens),
            ("timesteps", self.timesteps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("backend.toy.{name} must be >= 1")));
            }
        }
        if !self.attention_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig("backend.toy.attention_dim must be divisible by heads".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("backend.toy.time_dim must be even and >= 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("backend.toy.vocab_size must be >= 2".into()));
        }
        if self.latent_channels < 3 {
            return Err(Error::InvalidConfig("backend.toy.latent_channels must be >= 3 (RGB)".into()));
        }
        Ok(())
    }

    /// Average-pool factor of block `i`: `2^i`, capped by the powers of two dividing the resolution.
    pub fn pool_factor(&self, block: usize) -> usize {
        1 << block.min(self.resolution.trailing_zeros() as usize)
    }

    fn ff_dim(&self) -> usize {
        self.hidden_channels * self.ff_mult
    }
}

fn block_name(block: usize, tensor: &str) -> String {
    format!("cross_attention.block{block}.{tensor}")
}

fn ff_name(block: usize, tensor: &str) -> String {
    format!("unet_rest.block{block}.{tensor}")
}

pub struct ToyBackend {
    config: ToyConfig,
    tokenizer: Tokenizer,
    params: ParamStore,
    schedule: NoiseSchedule,
    tap: AttentionTap,
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Clone for ToyBackend {
    /// Clones parameters and vocabulary; the clone gets its own attention tap.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params: self.params.clone(),
            schedule: self.schedule.clone(),
            tap: AttentionTap::default(),
        }
    }
}

/// Builds a seeded toy backend and pretrains its denoiser for `config.pretrain_steps`.
pub fn toy_backend(config: ToyConfig, seed: u64) -> Result<ToyBackend> {
    let steps = config.pretrain_steps;
    let mut backend = ToyBackend::new(config, seed)?;
    pretrain_denoiser(&mut backend, steps, seed)?;
    Ok(backend)
}

/// Where the held-out pretraining loss stops improving by 2% per 1000 steps.
pub const DEFAULT_PRETRAIN_STEPS: usize = 8000;

/// Classes of the generic pretraining set; each gets its own synthetic object.
pub const PRETRAIN_CLASSES: &[&str] = &["toy", "cat", "dog", "bear", "backpack", "vase", "clock", "sculpture"];

const PRETRAIN_LR: f64 = 1e-3;
const PRETRAIN_BATCH: usize = 8;
const PRETRAIN_IMAGES_PER_CLASS: usize = 6;

/// Fits the denoiser groups to synthetic class images captioned "a photo of a {class}".
/// The token embeddings and text encoder keep their random initialization.
pub fn pretrain_denoiser(backend: &mut ToyBackend, steps: usize, seed: u64) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let res = backend.config.resolution;
    let mut classes = Vec::new();
    for word in PRETRAIN_CLASSES {
        let ids = backend.tokenize(&format!("a photo of a {word}"));
        if ids.contains(&backend.tokenizer.unk_id()) {
            continue;
        }
        let latents = synthetic_images(PRETRAIN_IMAGES_PER_CLASS, 2 * res as u32, derive_seed(seed, &format!("pretrain-{word}")))
            .iter()
            .map(|img| backend.encode_image(&preprocess(img, res)))
            .collect::<Result<Vec<_>>>()?;
        classes.push((ids, latents));
    }
    if classes.is_empty() {
        return Err(Error::InvalidConfig("backend.toy.vocab_size leaves no pretraining class words".into()));
    }
    let names: Vec<String> = backend
        .params
        .names()
        .filter(|n| matches!(group_of(n), groups::CROSS_ATTENTION | groups::UNET_REST))
        .cloned()
        .collect();
    let mut adam = Adam::new(AdamConfig::default(), PRETRAIN_LR);
    let mut rng = rng_for(seed, "pretrain");
    let shape = backend.latent_shape();
    let steps_total = backend.schedule.steps();
    for _ in 0..steps {
        let (ids, latents) = &classes[rng.random_range(0..classes.len())];
        let batch = DenoiseBatch {
            latents: (0..PRETRAIN_BATCH).map(|_| latents[rng.random_range(0..latents.len())].clone()).collect(),
            timesteps: (0..PRETRAIN_BATCH).map(|_| rng.random_range(0..steps_total)).collect(),
            noise: (0..PRETRAIN_BATCH).map(|_| gaussian(&shape, &mut rng)).collect(),
            token_ids: ids.clone(),
            token_index: Vec::new(),
            tokens: Vec::new(),
        };
        let out = backend.training_gradients(&batch, None)?;
        adam.begin_step();
        for name in &names {
            let param = backend.params.get_mut(name).expect("listed above");
            adam.update(name, &mut param.values, &out.grads[name]);
        }
    }
    Ok(())
}

impl ToyBackend {
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.beta_start, config.beta_end, config.timesteps)?;
        let tokenizer = Tokenizer::new(toy_vocabulary(config.vocab_size))?;
        let mut rng = rng_for(seed, "init");
        let mut params = ParamStore::default();
        let mut normal = |shape: Vec<usize>, std: f64, params: &mut ParamStore, name: String| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let values = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.insert(name, shape, values);
        };
        let (c, f, d, a, ff) =
            (config.latent_channels, config.hidden_channels, config.token_dim, config.attention_dim, config.ff_dim());
        let inv = |n: usize| 1.0 / (n as f64).sqrt();

        normal(vec![config.vocab_size, d], 1.0, &mut params, TOKEN_EMBEDDINGS.into());
        normal(vec![d, d], inv(d), &mut params, "text_encoder.token_proj".into());
        normal(vec![d, d], inv(d), &mut params, "text_encoder.context_proj".into());
        normal(vec![config.max_tokens, d], 0.5, &mut params, "text_encoder.positions".into());

        normal(vec![f, c], inv(c), &mut params, "unet_rest.conv_in.weight".into());
        params.insert("unet_rest.conv_in.bias", vec![f], vec![0.0; f]);
        normal(vec![f, config.time_dim], inv(config.time_dim), &mut params, "unet_rest.time_proj.weight".into());
        for b in 0..config.cross_attention_blocks {
            normal(vec![a, f], inv(f), &mut params, block_name(b, "to_q"));
            normal(vec![a, d], inv(d), &mut params, block_name(b, "to_k"));
            normal(vec![a, d], inv(d), &mut params, block_name(b, "to_v"));
            normal(vec![f, a], inv(a), &mut params, block_name(b, "to_out.weight"));
            params.insert(block_name(b, "to_out.bias"), vec![f], vec![0.0; f]);
            normal(vec![ff, f], inv(f), &mut params, ff_name(b, "ff1.weight"));
            params.insert(ff_name(b, "ff1.bias"), vec![ff], vec![0.0; ff]);
            normal(vec![f, ff], inv(ff), &mut params, ff_name(b, "ff2.weight"));
            params.insert(ff_name(b, "ff2.bias"), vec![f], vec![0.0; f]);
        }
        normal(vec![c, f], inv(f), &mut params, "unet_rest.conv_out.weight".into());
        params.insert("unet_rest.conv_out.bias", vec![c], vec![0.0; c]);

        Ok(Self { config, tokenizer, params, schedule, tap: AttentionTap::default() })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn pixels(&self) -> usize {
        self.config.resolution * self.config.resolution
    }

    fn text_forward(&self, ids: &[TokenId]) -> Result<TextCache> {
        let cfg = &self.config;
        let d = cfg.token_dim;
        if ids.is_empty() || ids.len() > cfg.max_tokens {
            return Err(Error::InvalidConfig(format!(
                "prompt has {} tokens; the toy text encoder accepts 1..={}",
                ids.len(),
                cfg.max_tokens
            )));
        }
        let table = self.params.values(TOKEN_EMBEDDINGS);
        let rows = table.len() / d;
        let mut emb = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownToken(id));
            }
            emb.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        let mut mean = vec![0.0; d];
        for j in 0..n {
            for k in 0..d {
                mean[k] += emb[j * d + k] / n as f64;
            }
        }
        let w_tok = self.params.values("text_encoder.token_proj");
        let w_ctx = self.params.values("text_encoder.context_proj");
        let pos = self.params.values("text_encoder.positions");
        let shared = matvec(w_ctx, &mean, d, d);
        let mut ctx = vec![0.0; n * d];
        for j in 0..n {
            let own = matvec(w_tok, &emb[j * d..(j + 1) * d], d, d);
            for e in 0..d {
                ctx[j * d + e] = (own[e] + shared[e] + pos[j * d + e]).tanh();
            }
        }
        let a = cfg.attention_dim;
        let mut keys = Vec::with_capacity(cfg.cross_attention_blocks);
        let mut vals = Vec::with_capacity(cfg.cross_attention_blocks);
        for b in 0..cfg.cross_attention_blocks {
            let wk = self.params.values(&block_name(b, "to_k"));
            let wv = self.params.values(&block_name(b, "to_v"));
            let mut k = vec![0.0; n * a];
            let mut v = vec![0.0; n * a];
            for j in 0..n {
                let c = &ctx[j * d..(j + 1) * d];
                k[j * a..(j + 1) * a].copy_from_slice(&matvec(wk, c, a, d));
                v[j * a..(j + 1) * a].copy_from_slice(&matvec(wv, c, a, d));
            }
            keys.push(k);
            vals.push(v);
        }
        Ok(TextCache { ids: ids.to_vec(), emb, mean, ctx, keys, vals })
    }

    fn unet_forward(&self, z: &[f64], t: usize, text: &TextCache) -> (Vec<f64>, ItemCache) {
        let cfg = &self.config;
        let (c, f, a, heads) = (cfg.latent_channels, cfg.hidden_channels, cfg.attention_dim, cfg.heads);
        let (side, p, n) = (cfg.resolution, self.pixels(), text.ids.len());
        let dh = a / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ff = cfg.ff_dim();

        let temb = timestep_embedding(t, cfg.time_dim);
        let time_bias = matvec(self.params.values("unet_rest.time_proj.weight"), &temb, f, cfg.time_dim);
        let w_in = self.params.values("unet_rest.conv_in.weight");
        let b_in = self.params.values("unet_rest.conv_in.bias");
        let mut h = vec![0.0; f * p];
        for fi in 0..f {
            let bias = b_in[fi] + time_bias[fi];
            let row = &mut h[fi * p..(fi + 1) * p];
            row.fill(bias);
            for ci in 0..c {
                let w = w_in[fi * c + ci];
                for (hv, zv) in row.iter_mut().zip(&z[ci * p..(ci + 1) * p]) {
                    *hv += w * zv;
                }
            }
        }

        let mut blocks = Vec::with_capacity(cfg.cross_attention_blocks);
        for b in 0..cfg.cross_attention_blocks {
            let pool = cfg.pool_factor(b);
            let r = side / pool;
            let q = r * r;
            let x = avg_pool(&h, f, side, pool);

            let wq = self.params.values(&block_name(b, "to_q"));
            let mut qv = vec![0.0; q * a];
            for qi in 0..q {
                for ai in 0..a {
                    let mut acc = 0.0;
                    for fi in 0..f {
                        acc += wq[ai * f + fi] * x[fi * q + qi];
                    }
                    qv[qi * a + ai] = acc;
                }
            }
            let (keys, vals) = (&text.keys[b], &text.vals[b]);
            let mut attn = vec![0.0; heads * q * n];
            let mut o = vec![0.0; q * a];
            for hd in 0..heads {
                let span = hd * dh..(hd + 1) * dh;
                for qi in 0..q {
                    let row = &mut attn[(hd * q + qi) * n..(hd * q + qi + 1) * n];
                    let qrow = &qv[qi * a + span.start..qi * a + span.end];
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = scale * dot(qrow, &keys[j * a + span.start..j * a + span.end]);
                    }
                    softmax_in_place(row);
                    for (j, &w) in row.iter().enumerate() {
                        for ai in span.clone() {
                            o[qi * a + ai] += w * vals[j * a + ai];
                        }
                    }
                }
            }
            let wo = self.params.values(&block_name(b, "to_out.weight"));
            let bo = self.params.values(&block_name(b, "to_out.bias"));
            let mut u = vec![0.0; f * q];
            for fi in 0..f {
                for qi in 0..q {
                    u[fi * q + qi] = bo[fi] + dot(&wo[fi * a..(fi + 1) * a], &o[qi * a..(qi + 1) * a]);
                }
            }
            for fi in 0..f {
                for y in 0..side {
                    for xx in 0..side {
                        h[fi * p + y * side + xx] += u[fi * q + (y / pool) * r + xx / pool];
                    }
                }
            }
            let h1 = h.clone();

            let w1 = self.params.values(&ff_name(b, "ff1.weight"));
            let b1 = self.params.values(&ff_name(b, "ff1.bias"));
            let w2 = self.params.values(&ff_name(b, "ff2.weight"));
            let b2 = self.params.values(&ff_name(b, "ff2.bias"));
            let mut g = vec![0.0; ff * p];
            for m in 0..ff {
                let row = &mut g[m * p..(m + 1) * p];
                row.fill(b1[m]);
                for fi in 0..f {
                    let w = w1[m * f + fi];
                    for (gv, hv) in row.iter_mut().zip(&h1[fi * p..(fi + 1) * p]) {
                        *gv += w * hv;
                    }
                }
            }
            let sg: Vec<f64> = g.iter().map(|&v| silu(v)).collect();
            for fi in 0..f {
                let row = &mut h[fi * p..(fi + 1) * p];
                for v in row.iter_mut() {
                    *v += b2[fi];
                }
                for m in 0..ff {
                    let w = w2[fi * ff + m];
                    for (hv, sv) in row.iter_mut().zip(&sg[m * p..(m + 1) * p]) {
                        *hv += w * sv;
                    }
                }
            }
            blocks.push(BlockCache { pool, r, x, qv, attn, o, h1, g, sg });
        }

        let w_out = self.params.values("unet_rest.conv_out.weight");
        let b_out = self.params.values("unet_rest.conv_out.bias");
        let mut eps = vec![0.0; c * p];
        for ci in 0..c {
            let row = &mut eps[ci * p..(ci + 1) * p];
            row.fill(b_out[ci]);
            for fi in 0..f {
                let w = w_out[ci * f + fi];
                for (ev, hv) in row.iter_mut().zip(&h[fi * p..(fi + 1) * p]) {
                    *ev += w * hv;
                }
            }
        }
        (eps, ItemCache { z: z.to_vec(), temb, blocks, h_final: h })
    }

    /// Backpropagates `d_eps` (and optional attention-map gradients, per block,
    /// laid out `heads × locations × tokens`) through one item.
    fn unet_backward(
        &self,
        cache: &ItemCache,
        text: &TextCache,
        d_eps: &[f64],
        d_attn_extra: Option<&[Vec<f64>]>,
        grads: &mut ToyGrads,
    ) {
        let cfg = &self.config;
        let (c, f, a, heads) = (cfg.latent_channels, cfg.hidden_channels, cfg.attention_dim, cfg.heads);
        let (side, p, n) = (cfg.resolution, self.pixels(), text.ids.len());
        let dh = a / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ff = cfg.ff_dim();

        let w_out = self.params.values("unet_rest.conv_out.weight");
        let mut dh_buf = vec![0.0; f * p];
        for ci in 0..c {
            let de = &d_eps[ci * p..(ci + 1) * p];
            grads.conv_out_b[ci] += de.iter().sum::<f64>();
            for fi in 0..f {
                grads.conv_out_w[ci * f + fi] += dot(de, &cache.h_final[fi * p..(fi + 1) * p]);
                let w = w_out[ci * f + fi];
                for (dv, e) in dh_buf[fi * p..(fi + 1) * p].iter_mut().zip(de) {
                    *dv += w * e;
                }
            }
        }

        for b in (0..cfg.cross_attention_blocks).rev() {
            let bc = &cache.blocks[b];
            let bg = &mut grads.blocks[b];
            let (pool, r) = (bc.pool, bc.r);
            let q = r * r;

            // Feed-forward residual.
            let w1 = self.params.values(&ff_name(b, "ff1.weight"));
            let w2 = self.params.values(&ff_name(b, "ff2.weight"));
            let mut dg = vec![0.0; ff * p];
            for fi in 0..f {
                let dhr = &dh_buf[fi * p..(fi + 1) * p];
                bg.ff2_b[fi] += dhr.iter().sum::<f64>();
                for m in 0..ff {
                    bg.ff2_w[fi * ff + m] += dot(dhr, &bc.sg[m * p..(m + 1) * p]);
                    let w = w2[fi * ff + m];
                    for (dgv, dv) in dg[m * p..(m + 1) * p].iter_mut().zip(dhr) {
                        *dgv += w * dv;
                    }
                }
            }
            for (dgv, &gv) in dg.iter_mut().zip(&bc.g) {
                *dgv *= silu_grad(gv);
            }
            for m in 0..ff {
                let dgr = &dg[m * p..(m + 1) * p];
                bg.ff1_b[m] += dgr.iter().sum::<f64>();
                for fi in 0..f {
                    bg.ff1_w[m * f + fi] += dot(dgr, &bc.h1[fi * p..(fi + 1) * p]);
                    let w = w1[m * f + fi];
                    for (dv, g) in dh_buf[fi * p..(fi + 1) * p].iter_mut().zip(dgr) {
                        *dv += w * g;
                    }
                }
            }

            // Attention residual.
            let mut du = vec![0.0; f * q];
            for fi in 0..f {
                for y in 0..side {
                    for xx in 0..side {
                        du[fi * q + (y / pool) * r + xx / pool] += dh_buf[fi * p + y * side + xx];
                    }
                }
            }
            let wo = self.params.values(&block_name(b, "to_out.weight"));
            let mut d_o = vec![0.0; q * a];
            for fi in 0..f {
                let dur = &du[fi * q..(fi + 1) * q];
                bg.out_b[fi] += dur.iter().sum::<f64>();
                for qi in 0..q {
                    let g = dur[qi];
                    if g == 0.0 {
                        continue;
                    }
                    for ai in 0..a {
                        bg.out_w[fi * a + ai] += g * bc.o[qi * a + ai];
                        d_o[qi * a + ai] += wo[fi * a + ai] * g;
                    }
                }
            }
            let (keys, vals) = (&text.keys[b], &text.vals[b]);
            let mut dqv = vec![0.0; q * a];
            let dk = &mut grads.d_keys[b];
            let dv = &mut grads.d_vals[b];
            let mut d_attn = vec![0.0; n];
            for hd in 0..heads {
                let span = hd * dh..(hd + 1) * dh;
                for qi in 0..q {
                    let base = (hd * q + qi) * n;
                    let attn = &bc.attn[base..base + n];
                    for j in 0..n {
                        let mut acc = 0.0;
                        for ai in span.clone() {
                            acc += d_o[qi * a + ai] * vals[j * a + ai];
                            dv[j * a + ai] += attn[j] * d_o[qi * a + ai];
                        }
                        d_attn[j] = acc;
                    }
                    if let Some(extra) = d_attn_extra {
                        for j in 0..n {
                            d_attn[j] += extra[b][base + j];
                        }
                    }
                    let inner: f64 = attn.iter().zip(&d_attn).map(|(w, g)| w * g).sum();
                    for j in 0..n {
                        let ds = attn[j] * (d_attn[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for ai in span.clone() {
                            dqv[qi * a + ai] += ds * keys[j * a + ai];
                            dk[j * a + ai] += ds * bc.qv[qi * a + ai];
                        }
                    }
                }
            }
            let wq = self.params.values(&block_name(b, "to_q"));
            let mut dx = vec![0.0; f * q];
            for qi in 0..q {
                for ai in 0..a {
                    let g = dqv[qi * a + ai];
                    for fi in 0..f {
                        bg.q[ai * f + fi] += g * bc.x[fi * q + qi];
                        dx[fi * q + qi] += wq[ai * f + fi] * g;
                    }
                }
            }
            let area = (pool * pool) as f64;
            for fi in 0..f {
                for y in 0..side {
                    for xx in 0..side {
                        dh_buf[fi * p + y * side + xx] += dx[fi * q + (y / pool) * r + xx / pool] / area;
                    }
                }
            }
        }

        for fi in 0..f {
            let dhr = &dh_buf[fi * p..(fi + 1) * p];
            let total: f64 = dhr.iter().sum();
            grads.conv_in_b[fi] += total;
            for k in 0..cfg.time_dim {
                grads.time_w[fi * cfg.time_dim + k] += total * cache.temb[k];
            }
            for ci in 0..c {
                grads.conv_in_w[fi * c + ci] += dot(dhr, &cache.z[ci * p..(ci + 1) * p]);
            }
        }
    }

    /// Folds accumulated key/value gradients back through the projections and the text encoder.
    fn text_backward(&self, text: &TextCache, grads: &mut ToyGrads) {
        let cfg = &self.config;
        let (d, a, n) = (cfg.token_dim, cfg.attention_dim, text.ids.len());
        let mut d_ctx = vec![0.0; n * d];
        for b in 0..cfg.cross_attention_blocks {
            let wk = self.params.values(&block_name(b, "to_k"));
            let wv = self.params.values(&block_name(b, "to_v"));
            let (dk, dv) = (&grads.d_keys[b], &grads.d_vals[b]);
            let bg = &mut grads.blocks[b];
            for j in 0..n {
                let ctx = &text.ctx[j * d..(j + 1) * d];
                for ai in 0..a {
                    let (gk, gv) = (dk[j * a + ai], dv[j * a + ai]);
                    for e in 0..d {
                        bg.k[ai * d + e] += gk * ctx[e];
                        bg.v[ai * d + e] += gv * ctx[e];
                        d_ctx[j * d + e] += wk[ai * d + e] * gk + wv[ai * d + e] * gv;
                    }
                }
            }
        }
        let w_tok = self.params.values("text_encoder.token_proj");
        let w_ctx = self.params.values("text_encoder.context_proj");
        let mut d_pre = d_ctx;
        for (g, c) in d_pre.iter_mut().zip(&text.ctx) {
            *g *= 1.0 - c * c;
        }
        let mut pre_sum = vec![0.0; d];
        for j in 0..n {
            for e in 0..d {
                let g = d_pre[j * d + e];
                pre_sum[e] += g;
                grads.te_pos[j * d + e] += g;
                for k in 0..d {
                    grads.te_tok[e * d + k] += g * text.emb[j * d + k];
                }
            }
        }
        for e in 0..d {
            for k in 0..d {
                grads.te_ctx[e * d + k] += pre_sum[e] * text.mean[k];
            }
        }
        let mut shared = vec![0.0; d];
        for k in 0..d {
            for e in 0..d {
                shared[k] += w_ctx[e * d + k] * pre_sum[e] / n as f64;
            }
        }
        for (j, &id) in text.ids.iter().enumerate() {
            for k in 0..d {
                let mut g = shared[k];
                for e in 0..d {
                    g += w_tok[e * d + k] * d_pre[j * d + e];
                }
                grads.emb[id * d + k] += g;
            }
        }
    }

    fn head_batch_mean(&self, caches: &[ItemCache], n: usize) -> Vec<AttentionRecord> {
        let cfg = &self.config;
        let heads = cfg.heads;
        let scale = 1.0 / (heads * caches.len()) as f64;
        (0..cfg.cross_attention_blocks)
            .map(|b| {
                let r = caches[0].blocks[b].r;
                let q = r * r;
                let mut values = vec![0.0; q * n];
                for cache in caches {
                    for (i, v) in cache.blocks[b].attn.iter().enumerate() {
                        values[i % (q * n)] += v * scale;
                    }
                }
                AttentionRecord { layer_id: b, height: r, width: r, num_tokens: n, values }
            })
            .collect()
    }
}

struct TextCache {
    ids: Vec<TokenId>,
    emb: Vec<f64>,
    mean: Vec<f64>,
    ctx: Vec<f64>,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
}

struct BlockCache {
    pool: usize,
    r: usize,
    x: Vec<f64>,
    qv: Vec<f64>,
    attn: Vec<f64>,
    o: Vec<f64>,
    h1: Vec<f64>,
    g: Vec<f64>,
    sg: Vec<f64>,
}

struct ItemCache {
    z: Vec<f64>,
    temb: Vec<f64>,
    blocks: Vec<BlockCache>,
    h_final: Vec<f64>,
}

#[derive(Default)]
struct BlockGrads {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
    ff1_w: Vec<f64>,
    ff1_b: Vec<f64>,
    ff2_w: Vec<f64>,
    ff2_b: Vec<f64>,
}

struct ToyGrads {
    emb: Vec<f64>,
    te_tok: Vec<f64>,
    te_ctx: Vec<f64>,
    te_pos: Vec<f64>,
    conv_in_w: Vec<f64>,
    conv_in_b: Vec<f64>,
    time_w: Vec<f64>,
    conv_out_w: Vec<f64>,
    conv_out_b: Vec<f64>,
    blocks: Vec<BlockGrads>,
    d_keys: Vec<Vec<f64>>,
    d_vals: Vec<Vec<f64>>,
}

impl ToyGrads {
    fn zeros(backend: &ToyBackend, n_tokens: usize) -> Self {
        let z = |name: &str| vec![0.0; backend.params.values(name).len()];
        let cfg = &backend.config;
        let blocks = (0..cfg.cross_attention_blocks)
            .map(|b| BlockGrads {
                q: z(&block_name(b, "to_q")),
                k: z(&block_name(b, "to_k")),
                v: z(&block_name(b, "to_v")),
                out_w: z(&block_name(b, "to_out.weight")),
                out_b: z(&block_name(b, "to_out.bias")),
                ff1_w: z(&ff_name(b, "ff1.weight")),
                ff1_b: z(&ff_name(b, "ff1.bias")),
                ff2_w: z(&ff_name(b, "ff2.weight")),
                ff2_b: z(&ff_name(b, "ff2.bias")),
            })
            .collect();
        let kv = vec![vec![0.0; n_tokens * cfg.attention_dim]; cfg.cross_attention_blocks];
        Self {
            emb: z(TOKEN_EMBEDDINGS),
            te_tok: z("text_encoder.token_proj"),
            te_ctx: z("text_encoder.context_proj"),
            te_pos: z("text_encoder.positions"),
            conv_in_w: z("unet_rest.conv_in.weight"),
            conv_in_b: z("unet_rest.conv_in.bias"),
            time_w: z("unet_rest.time_proj.weight"),
            conv_out_w: z("unet_rest.conv_out.weight"),
            conv_out_b: z("unet_rest.conv_out.bias"),
            blocks,
            d_keys: kv.clone(),
            d_vals: kv,
        }
    }

    fn into_map(self) -> BTreeMap<String, Vec<f64>> {
        let mut map = BTreeMap::new();
        map.insert(TOKEN_EMBEDDINGS.to_string(), self.emb);
        map.insert("text_encoder.token_proj".into(), self.te_tok);
        map.insert("text_encoder.context_proj".into(), self.te_ctx);
        map.insert("text_encoder.positions".into(), self.te_pos);
        map.insert("unet_rest.conv_in.weight".into(), self.conv_in_w);
        map.insert("unet_rest.conv_in.bias".into(), self.conv_in_b);
        map.insert("unet_rest.time_proj.weight".into(), self.time_w);
        map.insert("unet_rest.conv_out.weight".into(), self.conv_out_w);
        map.insert("unet_rest.conv_out.bias".into(), self.conv_out_b);
        for (b, g) in self.blocks.into_iter().enumerate() {
            map.insert(block_name(b, "to_q"), g.q);
            map.insert(block_name(b, "to_k"), g.k);
            map.insert(block_name(b, "to_v"), g.v);
            map.insert(block_name(b, "to_out.weight"), g.out_w);
            map.insert(block_name(b, "to_out.bias"), g.out_b);
            map.insert(ff_name(b, "ff1.weight"), g.ff1_w);
            map.insert(ff_name(b, "ff1.bias"), g.ff1_b);
            map.insert(ff_name(b, "ff2.weight"), g.ff2_w);
            map.insert(ff_name(b, "ff2.bias"), g.ff2_b);
        }
        map
    }
}

impl DiffusionBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn tokenizer_mut(&mut self) -> &mut Tokenizer {
        &mut self.tokenizer
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn embedding_dim(&self) -> usize {
        self.config.token_dim
    }

    fn input_resolution(&self) -> usize {
        self.config.resolution
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![self.config.latent_channels, self.config.resolution, self.config.resolution]
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn cross_attention_layers(&self) -> Vec<LayerGeometry> {
        (0..self.config.cross_attention_blocks)
            .map(|b| {
                let r = self.config.resolution / self.config.pool_factor(b);
                LayerGeometry { layer_id: b, height: r, width: r }
            })
            .collect()
    }

    fn tap(&self) -> &AttentionTap {
        &self.tap
    }

    fn encode_text(&self, ids: &[TokenId]) -> Result<Conditioning> {
        let cache = self.text_forward(ids)?;
        let n = ids.len();
        Ok(Conditioning {
            token_ids: ids.to_vec(),
            context: Tensor::new(vec![n, self.config.token_dim], cache.ctx)?,
        })
    }

    /// Pixels are latents: RGB fills the first three channels, the rest are zero.
    fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        let res = self.config.resolution;
        if pixels.shape() != [3, res, res] {
            return Err(Error::ShapeMismatch { left: pixels.shape().to_vec(), right: vec![3, res, res] });
        }
        let mut data = pixels.data().to_vec();
        data.resize(self.config.latent_channels * res * res, 0.0);
        Tensor::new(self.latent_shape(), data)
    }

    fn decode_latent(&self, latent: &Tensor) -> Result<Tensor> {
        let res = self.config.resolution;
        if latent.shape() != self.latent_shape() {
            return Err(Error::ShapeMismatch { left: latent.shape().to_vec(), right: self.latent_shape() });
        }
        Tensor::new(vec![3, res, res], latent.data()[..3 * res * res].iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        if z_t.shape() != self.latent_shape() {
            return Err(Error::ShapeMismatch { left: z_t.shape().to_vec(), right: self.latent_shape() });
        }
        if t >= self.schedule.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.schedule.steps() });
        }
        let text = self.text_forward(&cond.token_ids)?;
        let (eps, cache) = self.unet_forward(z_t.data(), t, &text);
        if self.tap.is_active() {
            let n = cond.token_ids.len();
            self.tap.record(&cond.token_ids, || self.head_batch_mean(std::slice::from_ref(&cache), n));
        }
        Tensor::new(self.latent_shape(), eps)
    }

    fn training_gradients(&self, batch: &DenoiseBatch, reg: Option<&AttentionRegularizer>) -> Result<StepGradients> {
        let items = batch.latents.len();
        if items == 0 || batch.timesteps.len() != items || batch.noise.len() != items {
            return Err(Error::DimensionMismatch { left: items, right: batch.timesteps.len().min(batch.noise.len()) });
        }
        let text = self.text_forward(&batch.token_ids)?;
        let n = batch.token_ids.len();
        let mut caches = Vec::with_capacity(items);
        let mut residuals = Vec::with_capacity(items);
        let mut sq = 0.0;
        let mut count = 0usize;
        for ((z0, &t), eps) in batch.latents.iter().zip(&batch.timesteps).zip(&batch.noise) {
            if z0.shape() != self.latent_shape() {
                return Err(Error::ShapeMismatch { left: z0.shape().to_vec(), right: self.latent_shape() });
            }
            let zt = super::add_noise(z0, t, eps, &self.schedule)?;
            let (pred, cache) = self.unet_forward(zt.data(), t, &text);
            let resid: Vec<f64> = pred.iter().zip(eps.data()).map(|(p, e)| p - e).collect();
            sq += resid.iter().map(|r| r * r).sum::<f64>();
            count += resid.len();
            residuals.push(resid);
            caches.push(cache);
        }
        let diffusion_loss = sq / count as f64;

        let maps = AttentionMapSet {
            layers: self.head_batch_mean(&caches, n),
            token_index: batch.token_index.clone(),
            tokens: batch.tokens.clone(),
        };
        let reg_out = reg.map(|r| r.loss_and_grad(&maps)).transpose()?;
        // Per-head, per-item share of the map gradient.
        let d_attn: Option<Vec<Vec<f64>>> = reg_out.as_ref().map(|out| {
            let share = 1.0 / (self.config.heads * items) as f64;
            out.grads
                .iter()
                .map(|g| {
                    let scaled: Vec<f64> = g.iter().map(|v| v * share).collect();
                    scaled.iter().cycle().take(scaled.len() * self.config.heads).copied().collect()
                })
                .collect()
        });

        let mut grads = ToyGrads::zeros(self, n);
        let scale = 2.0 / count as f64;
        for (cache, resid) in caches.iter().zip(&residuals) {
            let d_eps: Vec<f64> = resid.iter().map(|r| r * scale).collect();
            self.unet_backward(cache, &text, &d_eps, d_attn.as_deref(), &mut grads);
        }
        self.text_backward(&text, &mut grads);
        Ok(StepGradients { diffusion_loss, reg: reg_out, grads: grads.into_map(), maps })
    }
}

fn matvec(m: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).map(|r| dot(&m[r * cols..(r + 1) * cols], v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn avg_pool(h: &[f64], channels: usize, side: usize, pool: usize) -> Vec<f64> {
    if pool == 1 {
        return h.to_vec();
    }
    let r = side / pool;
    let q = r * r;
    let area = (pool * pool) as f64;
    let mut out = vec![0.0; channels * q];
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                out[c * q + (y / pool) * r + x / pool] += h[c * side * side + y * side + x] / area;
            }
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding: sines in the first half, cosines in the second.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Draws a standard-normal tensor of `shape`.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TokenRole;
    use crate::backend::{groups, DiffusionBackend};
    use crate::objectives::RegWeights;

    fn small() -> ToyConfig {
        ToyConfig { resolution: 4, hidden_channels: 3, token_dim: 4, attention_dim: 4, heads: 2, ..ToyConfig::default() }
    }

    fn batch(backend: &ToyBackend, seed: u64, items: usize) -> DenoiseBatch {
        let mut rng = rng_for(seed, "test-batch");
        let shape = backend.latent_shape();
        let ids = backend.tokenizer().encode("a photo of a toy cat");
        DenoiseBatch {
            latents: (0..items).map(|_| gaussian(&shape, &mut rng)).collect(),
            timesteps: (0..items).map(|i| (i * 37 + 5) % backend.schedule().steps()).collect(),
            noise: (0..items).map(|_| gaussian(&shape, &mut rng)).collect(),
            token_index: vec![(TokenRole::Concept, 5), (TokenRole::Category, 6)],
            tokens: vec![],
            token_ids: ids,
        }
    }

    fn objective(backend: &ToyBackend, b: &DenoiseBatch, reg: Option<&AttentionRegularizer>) -> f64 {
        let out = backend.training_gradients(b, reg).unwrap();
        out.diffusion_loss + out.reg.map_or(0.0, |r| r.loss)
    }

    /// Central differences on a few entries of every tensor, float64.
    fn check_gradients(reg: Option<&AttentionRegularizer>) {
        let mut backend = ToyBackend::new(small(), 3).unwrap();
        let b = batch(&backend, 11, 3);
        let analytic = backend.training_gradients(&b, reg).unwrap().grads;
        let names: Vec<String> = backend.params().names().cloned().collect();
        let h = 1e-6;
        for name in names {
            let len = backend.params().values(&name).len();
            let picks: Vec<usize> = if name == TOKEN_EMBEDDINGS {
                // rows used by the prompt
                b.token_ids.iter().map(|id| id * backend.embedding_dim() + 1).collect()
            } else {
                vec![0, len / 2, len - 1]
            };
            for i in picks {
                let orig = backend.params().values(&name)[i];
                backend.params_mut().get_mut(&name).unwrap().values[i] = orig + h;
                let up = objective(&backend, &b, reg);
                backend.params_mut().get_mut(&name).unwrap().values[i] = orig - h;
                let down = objective(&backend, &b, reg);
                backend.params_mut().get_mut(&name).unwrap().values[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let exact = analytic[&name][i];
                let err = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-7);
                assert!(err < 1e-5, "{name}[{i}]: analytic {exact} vs numeric {numeric} (rel {err})");
            }
        }
    }

    #[test]
    fn diffusion_gradient_matches_finite_differences() {
        check_gradients(None);
    }

    #[test]
    fn regularized_gradient_matches_finite_differences() {
        let reg = AttentionRegularizer::new(RegWeights::new(200.0, 5000.0).unwrap());
        check_gradients(Some(&reg));
    }

    #[test]
    fn default_groups_and_shapes() {
        let backend = ToyBackend::new(ToyConfig::default(), 0).unwrap();
        assert_eq!(
            backend.params().groups(),
            vec![groups::CROSS_ATTENTION, groups::TEXT_ENCODER, groups::TOKEN_EMBEDDINGS, groups::UNET_REST]
        );
        let layers = backend.cross_attention_layers();
        assert_eq!(layers.len(), 2);
        assert_eq!((layers[0].height, layers[1].height), (16, 8));
        let ids = backend.tokenizer().encode("a photo of a toy");
        let cond = backend.encode_text(&ids).unwrap();
        let z = gaussian(&backend.latent_shape(), &mut rng_for(0, "z"));
        let eps = backend.predict_noise(&z, 10, &cond).unwrap();
        assert_eq!(eps.shape(), z.shape());
    }

    #[test]
    fn single_head_maps_are_normalized() {
        let backend = ToyBackend::new(ToyConfig::default(), 1).unwrap();
        let b = batch(&backend, 2, 2);
        let maps = backend.training_gradients(&b, None).unwrap().maps;
        assert!(maps.is_normalized(1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(ToyBackend::new(ToyConfig { heads: 3, ..ToyConfig::default() }, 0).is_err());
        assert!(ToyBackend::new(ToyConfig { resolution: 0, ..ToyConfig::default() }, 0).is_err());
        assert!(ToyBackend::new(ToyConfig { time_dim: 3, ..ToyConfig::default() }, 0).is_err());
    }

    #[test]
    fn pool_factor_caps_at_resolution() {
        let cfg = ToyConfig { resolution: 4, cross_attention_blocks: 4, ..ToyConfig::default() };
        assert_eq!((0..4).map(|b| cfg.pool_factor(b)).collect::<Vec<_>>(), vec![1, 2, 4, 4]);
    }
}
