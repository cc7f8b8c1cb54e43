//! The diffusion-model contract used by the trainer, plus its implementations.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attention::{AttentionMapSet, AttentionTap, LayerGeometry, TokenRole};
use crate::error::{Error, Result};
use crate::objectives::{AttentionRegularizer, RegOutcome};
use crate::tensor::Tensor;

mod params;
pub mod pretrained;
mod schedule;
pub mod tokenizer;
pub mod toy;

pub use params::{group_of, Param, ParamStore};
pub use pretrained::{pretrained_adapter, PretrainedAdapter};
pub use schedule::{add_noise, NoiseSchedule};
pub use tokenizer::{TokenId, Tokenizer};
pub use toy::{toy_backend, ToyBackend, ToyConfig};

/// Name of the token-embedding table tensor.
pub const TOKEN_EMBEDDINGS: &str = "token_embeddings.weight";

/// Parameter group names shared by all backends.
pub mod groups {
    pub const TOKEN_EMBEDDINGS: &str = "token_embeddings";
    pub const TEXT_ENCODER: &str = "text_encoder";
    pub const CROSS_ATTENTION: &str = "cross_attention";
    pub const UNET_REST: &str = "unet_rest";
}

/// Text conditioning `c(y)` for a tokenized prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub token_ids: Vec<TokenId>,
    /// `[tokens, context_dim]`
    pub context: Tensor,
}

/// One optimizer step's worth of denoising problems sharing a prompt.
#[derive(Clone, Debug)]
pub struct DenoiseBatch {
    pub latents: Vec<Tensor>,
    pub timesteps: Vec<usize>,
    pub noise: Vec<Tensor>,
    pub token_ids: Vec<TokenId>,
    pub token_index: Vec<(TokenRole, usize)>,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct StepGradients {
    pub diffusion_loss: f64,
    pub reg: Option<RegOutcome>,
    /// Gradient of the total loss for every parameter tensor, by name.
    pub grads: BTreeMap<String, Vec<f64>>,
    /// Head- and batch-averaged maps of this step.
    pub maps: AttentionMapSet,
}

/// What the personalization trainer needs from a latent diffusion model.
pub trait DiffusionBackend: Send {
    fn name(&self) -> &str;
    fn tokenizer(&self) -> &Tokenizer;
    fn tokenizer_mut(&mut self) -> &mut Tokenizer;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn embedding_dim(&self) -> usize;
    /// Square pixel resolution images are preprocessed to.
    fn input_resolution(&self) -> usize;
    fn latent_shape(&self) -> Vec<usize>;
    fn schedule(&self) -> &NoiseSchedule;
    fn cross_attention_layers(&self) -> Vec<LayerGeometry>;
    fn tap(&self) -> &AttentionTap;
    fn encode_text(&self, ids: &[TokenId]) -> Result<Conditioning>;
    /// `[3, H, W]` pixels in [-1, 1] to a latent.
    fn encode_image(&self, pixels: &Tensor) -> Result<Tensor>;
    fn decode_latent(&self, latent: &Tensor) -> Result<Tensor>;
    /// Noise prediction; records attention maps into an active capture session.
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor>;
    /// Loss, maps and parameter gradients of `mse + reg` for one batch.
    fn training_gradients(&self, batch: &DenoiseBatch, reg: Option<&AttentionRegularizer>) -> Result<StepGradients>;

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.tokenizer().encode(text)
    }
}

/// Deterministic DDIM sampling with classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        // 7.5 is the common community guidance default.
        Self { steps: 25, guidance_scale: 7.5 }
    }
}

/// Evenly spaced timesteps from `T - 1` down to 0.
pub fn sampling_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    if steps == 1 {
        return vec![total - 1];
    }
    (0..steps).map(|i| i * (total - 1) / (steps - 1)).rev().collect()
}

/// Samples one latent. `uncond` is used only when guidance differs from 1.
pub fn sample_latent(
    backend: &dyn DiffusionBackend,
    cond: &Conditioning,
    uncond: &Conditioning,
    sampler: SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let schedule = backend.schedule();
    let shape = backend.latent_shape();
    let mut x = toy::gaussian(&shape, rng);
    let ts = sampling_timesteps(schedule.steps(), sampler.steps);
    for (i, &t) in ts.iter().enumerate() {
        let eps_c = backend.predict_noise(&x, t, cond)?;
        let eps = if sampler.guidance_scale == 1.0 {
            eps_c
        } else {
            let eps_u = backend.predict_noise(&x, t, uncond)?;
            let g = sampler.guidance_scale;
            let data = eps_u.data().iter().zip(eps_c.data()).map(|(u, c)| u + g * (c - u)).collect();
            Tensor::new(shape.clone(), data)?
        };
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&next) => schedule.alpha_bar(next)?,
            None => 1.0,
        };
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(xv, ev)| {
                let x0 = (xv - (1.0 - ab).sqrt() * ev) / ab.sqrt();
                ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * ev
            })
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplingFailure(format!("non-finite latent at timestep {t}")));
        }
        x = Tensor::new(shape.clone(), data)?;
    }
    Ok(x)
}
