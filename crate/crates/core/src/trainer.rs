//! Staged optimization with hard parameter-freezing contracts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{dump_maps, AttentionMapSet, Pooling, PooledStats, TokenRole};
use crate::backend::toy::gaussian;
use crate::backend::{groups, DenoiseBatch, DiffusionBackend, ParamStore, TOKEN_EMBEDDINGS};
use crate::checkpoint::Checkpoint;
use crate::concept::{
    build_training_prompt, inject_concept_token, snapshot_embedding, ConceptSpec, EmbeddingSnapshot, TokenHandle,
};
use crate::data::{make_batches, BatchConfig, ImageSet, TrainingBatch};
use crate::error::{Error, Result};
use crate::objectives::{AttentionRegularizer, RegWeights};
pub use crate::optim::{Adam, AdamConfig};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Stage1,
    Stage2,
    Stage3,
    Baseline,
}

impl StageId {
    /// Directory name inside a run directory.
    pub fn dir_name(self) -> &'static str {
        match self {
            StageId::Stage1 => "stage1",
            StageId::Stage2 => "stage2",
            StageId::Stage3 => "stage3",
            StageId::Baseline => "baseline",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(StageId::Stage1),
            "2" | "stage2" => Ok(StageId::Stage2),
            "3" | "stage3" => Ok(StageId::Stage3),
            "baseline" => Ok(StageId::Baseline),
            other => Err(Error::InvalidConfig(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainableScope {
    /// Only the placeholder row of the token-embedding table.
    EmbeddingOnly,
    CrossAttention,
    FullUnet,
    EmbeddingPlusFullUnet,
}

impl TrainableScope {
    /// Denoiser groups updated in full. The text encoder never appears here.
    pub fn denoiser_groups(self) -> &'static [&'static str] {
        match self {
            TrainableScope::EmbeddingOnly => &[],
            TrainableScope::CrossAttention => &[groups::CROSS_ATTENTION],
            TrainableScope::FullUnet | TrainableScope::EmbeddingPlusFullUnet => {
                &[groups::CROSS_ATTENTION, groups::UNET_REST]
            }
        }
    }

    pub fn trains_placeholder_row(self) -> bool {
        matches!(self, TrainableScope::EmbeddingOnly | TrainableScope::EmbeddingPlusFullUnet)
    }

    /// Every group this scope may modify.
    pub fn groups(self) -> Vec<&'static str> {
        let mut out = self.denoiser_groups().to_vec();
        if self.trains_placeholder_row() {
            out.insert(0, groups::TOKEN_EMBEDDINGS);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_id: StageId,
    pub scope: TrainableScope,
    pub learning_rate: f64,
    pub steps: usize,
    pub reg_weights: RegWeights,
    pub batch_size: usize,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("training.{}.{name}", self.stage_id);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "{} must be a positive number, got {}",
                field("learning_rate"),
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig(format!("{} must be >= 1", field("steps"))));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!("{} must be >= 1", field("batch_size"))));
        }
        for (name, v) in [("lambda_mu", self.reg_weights.lambda_mu), ("lambda_sigma", self.reg_weights.lambda_sigma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{} must be finite and >= 0, got {v}", field(name))));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 8;

/// Embedding warm-up, then cross-attention, then the whole denoiser.
pub fn default_schedule() -> [StagePlan; 3] {
    let plan = |stage_id, scope, learning_rate, steps, reg_weights| StagePlan {
        stage_id,
        scope,
        learning_rate,
        steps,
        reg_weights,
        batch_size: DEFAULT_BATCH_SIZE,
    };
    let reg = RegWeights { lambda_mu: 2.0, lambda_sigma: 5.0 };
    [
        plan(StageId::Stage1, TrainableScope::EmbeddingOnly, 1e-3, 60, RegWeights { lambda_mu: 0.1, lambda_sigma: 0.0 }),
        plan(StageId::Stage2, TrainableScope::CrossAttention, 2e-5, 100, reg),
        plan(StageId::Stage3, TrainableScope::FullUnet, 2e-6, 500, reg),
    ]
}

/// Joint embedding + denoiser fine-tuning without the regularizer.
pub fn baseline_plan() -> StagePlan {
    StagePlan {
        stage_id: StageId::Baseline,
        scope: TrainableScope::EmbeddingPlusFullUnet,
        learning_rate: 2e-6,
        steps: 660,
        reg_weights: RegWeights::ZERO,
        batch_size: DEFAULT_BATCH_SIZE,
    }
}

// ---------------------------------------------------------------------------
// Fingerprints

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamFingerprint {
    pub group_name: String,
    /// Hex SHA-256.
    pub digest: String,
}

fn hash_tensor(hasher: &mut Sha256, name: &str, shape: &[usize], values: &[f64]) {
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update((shape.len() as u64).to_le_bytes());
    for d in shape {
        hasher.update((*d as u64).to_le_bytes());
    }
    for v in values {
        hasher.update(v.to_le_bytes());
    }
}

/// SHA-256 over every tensor of `group` in name order: name, shape, then f64 values, all little-endian.
pub fn fingerprint_params(params: &ParamStore, group: &str) -> Result<ParamFingerprint> {
    let mut hasher = Sha256::new();
    for (name, param) in params.group(group)? {
        hash_tensor(&mut hasher, name, &param.shape, &param.values);
    }
    Ok(ParamFingerprint { group_name: group.to_string(), digest: hex::encode(hasher.finalize()) })
}

pub fn fingerprint_all(params: &ParamStore) -> Result<BTreeMap<String, ParamFingerprint>> {
    params.groups().into_iter().map(|g| Ok((g.clone(), fingerprint_params(params, &g)?))).collect()
}

/// Indices of embedding rows whose values differ bitwise between two tables.
pub fn changed_rows(before: &[f64], after: &[f64], width: usize) -> Vec<usize> {
    let rows = before.len().max(after.len()) / width;
    (0..rows)
        .filter(|&r| {
            let span = r * width..(r + 1) * width;
            match (before.get(span.clone()), after.get(span)) {
                (Some(a), Some(b)) => a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()),
                _ => true,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stage execution

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub pooling: Pooling,
    pub detach_category: bool,
    pub hflip: bool,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { pooling: Pooling::Concat, detach_category: false, hflip: false, adam: AdamConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: StageId,
    pub diffusion_loss: f64,
    pub reg_loss: f64,
    pub mu_v: f64,
    pub mu_cat: f64,
    pub var_v: f64,
    pub var_cat: f64,
}

/// Pooled statistics of the two regularized tokens on a fixed probe batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub concept: PooledStats,
    pub category: PooledStats,
}

impl ProbeStats {
    pub fn mean_gap(&self) -> f64 {
        (self.concept.mean - self.category.mean).abs()
    }

    pub fn variance_gap(&self) -> f64 {
        (self.concept.variance - self.category.variance).abs()
    }
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub plan: StagePlan,
    pub losses: Vec<LossRecord>,
    pub fingerprints_before: BTreeMap<String, ParamFingerprint>,
    pub fingerprints_after: BTreeMap<String, ParamFingerprint>,
    pub changed_groups: Vec<String>,
    pub changed_embedding_rows: Vec<usize>,
    pub snapshot: EmbeddingSnapshot,
    /// Maps of the last optimizer step.
    pub final_maps: AttentionMapSet,
    pub probe_before: ProbeStats,
    pub probe_after: ProbeStats,
    pub wall_time_secs: f64,
}

impl StageResult {
    pub fn final_losses(&self) -> Option<&LossRecord> {
        self.losses.last()
    }
}

/// Everything the trainer needs to know about the concept's prompt.
#[derive(Clone, Debug)]
pub struct PromptBinding {
    pub token_ids: Vec<usize>,
    pub token_index: Vec<(TokenRole, usize)>,
    pub tokens: Vec<String>,
}

impl PromptBinding {
    pub fn for_concept(backend: &dyn DiffusionBackend, spec: &ConceptSpec) -> Result<Self> {
        let prompt = build_training_prompt(spec, backend.tokenizer())?;
        let token_ids = backend.tokenize(&prompt.text);
        let tokens = token_ids
            .iter()
            .map(|&id| backend.tokenizer().token(id).unwrap_or("?").to_string())
            .collect();
        Ok(Self {
            token_ids,
            token_index: vec![
                (TokenRole::Concept, prompt.placeholder_position),
                (TokenRole::Category, prompt.category_position),
            ],
            tokens,
        })
    }
}

/// Fixed latents, timesteps and noise used to measure the pooled statistics without sampling noise.
pub fn probe_batch(backend: &dyn DiffusionBackend, images: &ImageSet, binding: &PromptBinding, seed: u64) -> Result<DenoiseBatch> {
    let mut rng = rng_for(seed, "probe");
    let res = backend.input_resolution();
    let steps = backend.schedule().steps();
    let mut latents = Vec::new();
    let mut timesteps = Vec::new();
    let mut noise = Vec::new();
    let count = images.len().max(4);
    for i in 0..count {
        let pixels = crate::data::preprocess(&images.images[i % images.len()], res);
        latents.push(backend.encode_image(&pixels)?);
        // Spread the probe over the whole schedule.
        timesteps.push((i * steps + steps / 2) / count);
        noise.push(gaussian(&backend.latent_shape(), &mut rng));
    }
    Ok(DenoiseBatch {
        latents,
        timesteps,
        noise,
        token_ids: binding.token_ids.clone(),
        token_index: binding.token_index.clone(),
        tokens: binding.tokens.clone(),
    })
}

pub fn probe_stats(backend: &dyn DiffusionBackend, probe: &DenoiseBatch, pooling: Pooling) -> Result<ProbeStats> {
    let out = backend.training_gradients(probe, None)?;
    let reg = AttentionRegularizer { weights: RegWeights::ZERO, pooling, detach_category: false };
    let (_, concept, category) = reg.loss(&out.maps)?;
    Ok(ProbeStats { concept, category })
}

struct ScopeSlot {
    tensor: String,
    /// Element range updated within the tensor.
    range: std::ops::Range<usize>,
}

fn resolve_scope(backend: &dyn DiffusionBackend, scope: TrainableScope, handle: &TokenHandle) -> Result<Vec<ScopeSlot>> {
    let params = backend.params();
    let mut slots = Vec::new();
    if scope.trains_placeholder_row() {
        let dim = backend.embedding_dim();
        let table = params
            .get(TOKEN_EMBEDDINGS)
            .ok_or_else(|| Error::ScopeResolutionFailure(format!("backend has no {TOKEN_EMBEDDINGS}")))?;
        let range = handle.token_id * dim..(handle.token_id + 1) * dim;
        if range.end > table.values.len() {
            return Err(Error::ScopeResolutionFailure(format!(
                "placeholder row {} outside the embedding table",
                handle.token_id
            )));
        }
        slots.push(ScopeSlot { tensor: TOKEN_EMBEDDINGS.to_string(), range });
    }
    for group in scope.denoiser_groups() {
        let tensors = params
            .group(group)
            .map_err(|_| Error::ScopeResolutionFailure(format!("backend {} has no group {group:?}", backend.name())))?;
        for (name, param) in tensors {
            slots.push(ScopeSlot { tensor: name.clone(), range: 0..param.values.len() });
        }
    }
    Ok(slots)
}

/// Per-stage randomness labels, so that stages never share a stream.
fn stage_label(stage: StageId, what: &str) -> String {
    format!("{stage}-{what}")
}

/// Runs one stage from an already-built batch stream.
///
/// The loss is checked before every update, so a non-finite step aborts with the
/// parameters of the last good step in place.
pub fn run_stage_on(
    backend: &mut dyn DiffusionBackend,
    handle: &TokenHandle,
    plan: &StagePlan,
    batches: impl IntoIterator<Item = TrainingBatch>,
    probe: &DenoiseBatch,
    options: &TrainOptions,
    seed: u64,
    step_offset: u64,
) -> Result<StageResult> {
    plan.validate()?;
    let started = Instant::now();
    let slots = resolve_scope(&*backend, plan.scope, handle)?;
    let fingerprints_before = fingerprint_all(backend.params())?;
    let table_before = backend.params().values(TOKEN_EMBEDDINGS).to_vec();
    let probe_before = probe_stats(&*backend, probe, options.pooling)?;

    let regularizer = AttentionRegularizer {
        weights: plan.reg_weights,
        pooling: options.pooling,
        detach_category: options.detach_category,
    };
    let mut adam = Adam::new(options.adam, plan.learning_rate);
    let mut rng = rng_for(seed, &stage_label(plan.stage_id, "noise"));
    let steps_total = backend.schedule().steps();
    let latent_shape = backend.latent_shape();
    let mut losses = Vec::with_capacity(plan.steps);
    let mut final_maps = None;

    for (step, batch) in batches.into_iter().take(plan.steps).enumerate() {
        let items = batch.pixel_tensor.shape()[0];
        let mut latents = Vec::with_capacity(items);
        for i in 0..items {
            let pixels = Tensor::new(batch.pixel_tensor.shape()[1..].to_vec(), batch.pixel_tensor.outer(i).to_vec())?;
            latents.push(backend.encode_image(&pixels)?);
        }
        let timesteps: Vec<usize> = (0..items).map(|_| rng.random_range(0..steps_total)).collect();
        let noise: Vec<Tensor> = (0..items).map(|_| gaussian(&latent_shape, &mut rng)).collect();
        let denoise = DenoiseBatch {
            latents,
            timesteps,
            noise,
            token_ids: batch.prompt_token_ids.clone(),
            token_index: batch.token_positions.clone(),
            tokens: probe.tokens.clone(),
        };
        let reg_arg = (!plan.reg_weights.is_zero()).then_some(&regularizer);
        let out = backend.training_gradients(&denoise, reg_arg)?;
        let (reg_loss, concept, category) = match &out.reg {
            Some(r) => (r.loss, r.concept, r.category),
            None => regularizer.loss(&out.maps)?,
        };
        let in_scope_finite = slots.iter().all(|s| out.grads[&s.tensor][s.range.clone()].iter().all(|g| g.is_finite()));
        if !(out.diffusion_loss.is_finite() && reg_loss.is_finite() && in_scope_finite) {
            return Err(Error::NonFiniteLoss {
                stage: plan.stage_id.to_string(),
                step,
                diffusion: out.diffusion_loss,
                reg: reg_loss,
            });
        }
        backend.tap().record(&denoise.token_ids, || out.maps.layers.clone());

        adam.begin_step();
        let params = backend.params_mut();
        for slot in &slots {
            let grads = &out.grads[&slot.tensor][slot.range.clone()];
            let values = &mut params.get_mut(&slot.tensor).expect("resolved above").values[slot.range.clone()];
            adam.update(&slot.tensor, values, grads);
        }
        losses.push(LossRecord {
            step,
            stage: plan.stage_id,
            diffusion_loss: out.diffusion_loss,
            reg_loss,
            mu_v: concept.mean,
            mu_cat: category.mean,
            var_v: concept.variance,
            var_cat: category.variance,
        });
        final_maps = Some(out.maps);
    }
    if losses.len() != plan.steps {
        return Err(Error::InvalidConfig(format!(
            "{}: batch stream ended after {} of {} steps",
            plan.stage_id,
            losses.len(),
            plan.steps
        )));
    }

    let fingerprints_after = fingerprint_all(backend.params())?;
    let changed_groups = fingerprints_after
        .iter()
        .filter(|(g, fp)| fingerprints_before.get(*g) != Some(fp))
        .map(|(g, _)| g.clone())
        .collect();
    let changed_embedding_rows =
        changed_rows(&table_before, backend.params().values(TOKEN_EMBEDDINGS), backend.embedding_dim());
    let snapshot = snapshot_embedding(&*backend, handle, step_offset + plan.steps as u64)?;
    let probe_after = probe_stats(&*backend, probe, options.pooling)?;
    Ok(StageResult {
        plan: *plan,
        losses,
        fingerprints_before,
        fingerprints_after,
        changed_groups,
        changed_embedding_rows,
        snapshot,
        final_maps: final_maps.expect("at least one step"),
        probe_before,
        probe_after,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Runs one stage, sampling its batches from `images`.
pub fn run_stage(
    backend: &mut dyn DiffusionBackend,
    handle: &TokenHandle,
    plan: &StagePlan,
    images: &ImageSet,
    binding: &PromptBinding,
    options: &TrainOptions,
    seed: u64,
    step_offset: u64,
) -> Result<StageResult> {
    let config = BatchConfig {
        batch_size: plan.batch_size,
        total_steps: plan.steps,
        resolution: backend.input_resolution(),
        hflip: options.hflip,
    };
    let batches = make_batches(
        images,
        &binding.token_ids,
        &binding.token_index,
        config,
        derive_seed(seed, &stage_label(plan.stage_id, "data")),
    )?;
    let probe = probe_batch(&*backend, images, binding, seed)?;
    run_stage_on(backend, handle, plan, batches, &probe, options, seed, step_offset)
}

// ---------------------------------------------------------------------------
// Full runs and run directories

pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const FINAL_DIR: &str = "final";
pub const BASE_DIR: &str = "base";

fn denoiser_groups(params: &ParamStore) -> Vec<String> {
    params
        .groups()
        .into_iter()
        .filter(|g| g == groups::CROSS_ATTENTION || g == groups::UNET_REST)
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainedArtifacts {
    pub handle: TokenHandle,
    pub initial_snapshot: EmbeddingSnapshot,
    pub stages: Vec<StageResult>,
    pub final_fingerprints: BTreeMap<String, ParamFingerprint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: StageId,
    pub scope: TrainableScope,
    pub steps: usize,
    pub final_diffusion_loss: f64,
    pub final_reg_loss: f64,
    pub changed_groups: Vec<String>,
    pub probe_before: ProbeStats,
    pub probe_after: ProbeStats,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub handle: TokenHandle,
    pub stages: Vec<StageSummary>,
    pub final_fingerprints: BTreeMap<String, ParamFingerprint>,
}

impl RunSummary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(FINAL_DIR).join(SUMMARY_FILE);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedArtifact { path, reason: e.to_string() })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_losses(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for record in losses {
        let line = serde_json::to_string(record)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRecord>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::MalformedArtifact { path: path.to_path_buf(), reason: e.to_string() })
        })
        .collect()
}

fn stage_checkpoint(params: &ParamStore, scope_groups: &[String], handle: &TokenHandle) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::default();
    ckpt.add_groups(params, scope_groups)?;
    ckpt.add_row(params, TOKEN_EMBEDDINGS, handle.token_id)?;
    Ok(ckpt)
}

/// Injects the concept token and runs `schedule` in order. With a `run_dir`, writes
/// per-stage checkpoints, loss logs and attention dumps, embedding snapshots and a summary.
pub fn run_full(
    backend: &mut dyn DiffusionBackend,
    spec: &ConceptSpec,
    images: &ImageSet,
    schedule: &[StagePlan],
    options: &TrainOptions,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<TrainedArtifacts> {
    if schedule.is_empty() {
        return Err(Error::InvalidConfig("schedule has no stages".into()));
    }
    for plan in schedule {
        plan.validate()?;
    }
    if let Some(dir) = run_dir {
        // The starting denoiser, so restores do not depend on how it was produced.
        let base_dir = dir.join(BASE_DIR);
        create_dir(&base_dir)?;
        let mut base = Checkpoint::default();
        base.add_groups(backend.params(), &denoiser_groups(backend.params()))?;
        base.save(&base_dir.join(CHECKPOINT_FILE))?;
    }
    let handle = inject_concept_token(backend, spec)?;
    let binding = PromptBinding::for_concept(&*backend, spec)?;
    let initial_snapshot = snapshot_embedding(&*backend, &handle, 0)?;
    if let Some(dir) = run_dir {
        create_dir(&dir.join(SNAPSHOT_DIR))?;
        initial_snapshot.save(&dir.join(SNAPSHOT_DIR).join("init"))?;
    }

    let mut stages = Vec::with_capacity(schedule.len());
    let mut trained_groups: Vec<String> = Vec::new();
    let mut step_offset = 0u64;
    for plan in schedule {
        info!("{}: {:?}, lr {}, {} steps", plan.stage_id, plan.scope, plan.learning_rate, plan.steps);
        let result = run_stage(backend, &handle, plan, images, &binding, options, seed, step_offset)?;
        step_offset += plan.steps as u64;
        let scope_groups: Vec<String> = plan.scope.denoiser_groups().iter().map(|g| g.to_string()).collect();
        for g in &scope_groups {
            if !trained_groups.contains(g) {
                trained_groups.push(g.clone());
            }
        }
        if let Some(dir) = run_dir {
            let stage_dir = dir.join(plan.stage_id.dir_name());
            create_dir(&stage_dir)?;
            stage_checkpoint(backend.params(), &scope_groups, &handle)?.save(&stage_dir.join(CHECKPOINT_FILE))?;
            write_losses(&stage_dir.join(LOSSES_FILE), &result.losses)?;
            dump_maps(&result.final_maps, &stage_dir.join("attn"))?;
            result.snapshot.save(&dir.join(SNAPSHOT_DIR).join(plan.stage_id.dir_name()))?;
        }
        if let Some(last) = result.final_losses() {
            info!(
                "{} done in {:.1}s: diffusion {:.5}, reg {:.3e}, changed {:?}",
                plan.stage_id, result.wall_time_secs, last.diffusion_loss, last.reg_loss, result.changed_groups
            );
        }
        stages.push(result);
    }

    let final_fingerprints = fingerprint_all(backend.params())?;
    if let Some(dir) = run_dir {
        let final_dir = dir.join(FINAL_DIR);
        create_dir(&final_dir)?;
        stage_checkpoint(backend.params(), &trained_groups, &handle)?.save(&final_dir.join(CHECKPOINT_FILE))?;
        let summary = RunSummary {
            seed,
            handle: handle.clone(),
            stages: stages
                .iter()
                .map(|s| {
                    let last = s.final_losses().expect("validated steps >= 1");
                    StageSummary {
                        stage: s.plan.stage_id,
                        scope: s.plan.scope,
                        steps: s.plan.steps,
                        final_diffusion_loss: last.diffusion_loss,
                        final_reg_loss: last.reg_loss,
                        changed_groups: s.changed_groups.clone(),
                        probe_before: s.probe_before,
                        probe_after: s.probe_after,
                        wall_time_secs: s.wall_time_secs,
                    }
                })
                .collect(),
            final_fingerprints: final_fingerprints.clone(),
        };
        let path = final_dir.join(SUMMARY_FILE);
        fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainedArtifacts { handle, initial_snapshot, stages, final_fingerprints })
}

/// Rebuilds trained parameters on a freshly initialized backend (same seed and
/// config as the run): overlays the base denoiser, injects the concept token, then
/// overlays stage checkpoints. `upto = None` loads the final state.
pub fn restore_run(
    backend: &mut dyn DiffusionBackend,
    spec: &ConceptSpec,
    run_dir: &Path,
    upto: Option<StageId>,
) -> Result<TokenHandle> {
    let summary = RunSummary::load(run_dir)?;
    Checkpoint::load(&run_dir.join(BASE_DIR).join(CHECKPOINT_FILE))?.apply(backend.params_mut())?;
    let handle = inject_concept_token(backend, spec)?;
    if handle.token_id != summary.handle.token_id {
        return Err(Error::MalformedArtifact {
            path: run_dir.to_path_buf(),
            reason: format!("placeholder id {} does not match recorded id {}", handle.token_id, summary.handle.token_id),
        });
    }
    match upto {
        None => Checkpoint::load(&run_dir.join(FINAL_DIR).join(CHECKPOINT_FILE))?.apply(backend.params_mut())?,
        Some(target) => {
            if !summary.stages.iter().any(|s| s.stage == target) {
                return Err(Error::MissingArtifact(run_dir.join(target.dir_name()).join(CHECKPOINT_FILE)));
            }
            for stage in summary.stages.iter().map(|s| s.stage) {
                Checkpoint::load(&run_dir.join(stage.dir_name()).join(CHECKPOINT_FILE))?.apply(backend.params_mut())?;
                if stage == target {
                    break;
                }
            }
        }
    }
    Ok(handle)
}

/// The recorded stage order, for callers that iterate snapshots.
pub fn recorded_stages(run_dir: &Path) -> Result<Vec<StageId>> {
    Ok(RunSummary::load(run_dir)?.stages.iter().map(|s| s.stage).collect())
}

pub fn snapshot_stem(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join(SNAPSHOT_DIR).join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyConfig};

    fn tiny() -> ToyConfig {
        ToyConfig { resolution: 8, hidden_channels: 4, token_dim: 8, attention_dim: 8, ..ToyConfig::default() }
    }

    fn images() -> ImageSet {
        let dir = tempfile::tempdir().unwrap();
        crate::data::write_synthetic_concept(dir.path(), 3, 12, 5).unwrap();
        crate::data::load_concept_images(dir.path()).unwrap()
    }

    fn short(plan: StagePlan, steps: usize) -> StagePlan {
        StagePlan { steps, batch_size: 2, learning_rate: plan.learning_rate.max(1e-3), ..plan }
    }

    #[test]
    fn scopes_never_include_text_encoder() {
        for scope in [
            TrainableScope::EmbeddingOnly,
            TrainableScope::CrossAttention,
            TrainableScope::FullUnet,
            TrainableScope::EmbeddingPlusFullUnet,
        ] {
            assert!(!scope.groups().contains(&groups::TEXT_ENCODER));
        }
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let backend = ToyBackend::new(tiny(), 1).unwrap();
        let a = fingerprint_params(backend.params(), "unet_rest").unwrap();
        assert_eq!(a, fingerprint_params(backend.params(), "unet_rest").unwrap());
        let other = fingerprint_params(backend.params(), "cross_attention").unwrap();
        let mut perturbed = backend.clone();
        perturbed.params_mut().get_mut("unet_rest.conv_in.bias").unwrap().values[0] += 1e-7;
        assert_ne!(a, fingerprint_params(perturbed.params(), "unet_rest").unwrap());
        assert_eq!(other, fingerprint_params(perturbed.params(), "cross_attention").unwrap());
        assert!(matches!(fingerprint_params(backend.params(), "vae"), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn stages_respect_their_scopes() {
        let mut backend = ToyBackend::new(tiny(), 2).unwrap();
        let spec = ConceptSpec::new("toy", "unused", "toy");
        let [s1, s2, s3] = default_schedule();
        let schedule = [short(s1, 3), short(s2, 3), short(s3, 3)];
        let run = run_full(&mut backend, &spec, &images(), &schedule, &TrainOptions::default(), 7, None).unwrap();
        assert_eq!(run.stages[0].changed_groups, vec!["token_embeddings"]);
        assert_eq!(run.stages[0].changed_embedding_rows, vec![run.handle.token_id]);
        assert_eq!(run.stages[1].changed_groups, vec!["cross_attention"]);
        assert_eq!(run.stages[2].changed_groups, vec!["cross_attention", "unet_rest"]);
    }

    #[test]
    fn nan_batch_aborts_without_updating() {
        let mut backend = ToyBackend::new(tiny(), 2).unwrap();
        let spec = ConceptSpec::new("toy", "unused", "toy");
        let handle = inject_concept_token(&mut backend, &spec).unwrap();
        let binding = PromptBinding::for_concept(&backend, &spec).unwrap();
        let set = images();
        let probe = probe_batch(&backend, &set, &binding, 0).unwrap();
        let config = BatchConfig { batch_size: 2, total_steps: 3, resolution: 8, hflip: false };
        let mut batches: Vec<TrainingBatch> =
            make_batches(&set, &binding.token_ids, &binding.token_index, config, 0).unwrap().collect();
        batches[1].pixel_tensor.data_mut()[0] = f64::NAN;
        let plan = short(default_schedule()[1], 3);

        let mut after_one = backend.clone();
        run_stage_on(&mut after_one, &handle, &StagePlan { steps: 1, ..plan }, batches[..1].to_vec(), &probe, &TrainOptions::default(), 0, 0)
            .unwrap();
        let err = run_stage_on(&mut backend, &handle, &plan, batches, &probe, &TrainOptions::default(), 0, 0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }), "{err}");
        assert_eq!(fingerprint_all(backend.params()).unwrap(), fingerprint_all(after_one.params()).unwrap());
    }

    #[test]
    fn run_dir_restores_final_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ConceptSpec::new("toy", "unused", "toy");
        let mut backend = ToyBackend::new(tiny(), 4).unwrap();
        let schedule = [short(baseline_plan(), 2)];
        let run = run_full(&mut backend, &spec, &images(), &schedule, &TrainOptions::default(), 9, Some(dir.path())).unwrap();

        let mut fresh = ToyBackend::new(tiny(), 4).unwrap();
        restore_run(&mut fresh, &spec, dir.path(), None).unwrap();
        for (name, param) in backend.params().iter() {
            let restored = fresh.params().values(name);
            let max = param.values.iter().zip(restored).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max < 1e-6, "{name} differs by {max}");
        }
        assert_eq!(recorded_stages(dir.path()).unwrap(), vec![StageId::Baseline]);
        assert_eq!(read_losses(&dir.path().join("baseline").join(LOSSES_FILE)).unwrap(), run.stages[0].losses);
        assert!(dir.path().join("baseline/attn/manifest.json").is_file());
    }
}
