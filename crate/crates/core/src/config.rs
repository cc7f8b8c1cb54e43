//! Run configuration: one TOML file per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::Pooling;
use crate::backend::{SamplerConfig, ToyConfig};
use crate::concept::ConceptSpec;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::trainer::{baseline_plan, default_schedule, StageId, StagePlan, TrainOptions};

/// Overrides `output_dir` when set.
pub const RUN_DIR_ENV: &str = "ATTNDB_RUN_DIR";
/// Name of the effective config written into every run directory.
pub const RUN_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Toy,
    Pretrained,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "pretrained" => Ok(BackendKind::Pretrained),
            other => Err(Error::InvalidConfig(format!("backend.kind must be toy or pretrained, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    pub toy: ToyConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// The three-stage schedule.
    #[default]
    Staged,
    /// One joint embedding + denoiser stage without the regularizer.
    Baseline,
}

/// Any subset of a stage's settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl StageOverride {
    fn apply(&self, plan: &mut StagePlan) {
        if let Some(v) = self.learning_rate {
            plan.learning_rate = v;
        }
        if let Some(v) = self.steps {
            plan.steps = v;
        }
        if let Some(v) = self.lambda_mu {
            plan.reg_weights.lambda_mu = v;
        }
        if let Some(v) = self.lambda_sigma {
            plan.reg_weights.lambda_sigma = v;
        }
        if let Some(v) = self.batch_size {
            plan.batch_size = v;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub mode: TrainingMode,
    pub pooling: Pooling,
    pub detach_category: bool,
    pub hflip: bool,
    pub adam: AdamConfig,
    pub stage1: StageOverride,
    pub stage2: StageOverride,
    pub stage3: StageOverride,
    pub baseline: StageOverride,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub images_per_prompt: usize,
    pub sampling_steps: usize,
    /// Classifier-free guidance scale. 7.5 is a common convention, not a tuned value.
    pub guidance_scale: f64,
    pub embedder_seed: u64,
    /// Prompt file replacing the built-in suite.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<PathBuf>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        Self {
            images_per_prompt: 4,
            sampling_steps: sampler.steps,
            guidance_scale: sampler.guidance_scale,
            embedder_seed: 0,
            suite: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub concept: ConceptSpec,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    /// A toy-backend config with every other setting at its default.
    pub fn toy(concept: ConceptSpec, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            output_dir: output_dir.into(),
            concept,
            backend: BackendSection::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string() + &location(text, e.span())))
    }

    /// Parses `path`; relative paths inside are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.output_dir);
        resolve(&mut config.concept.image_dir);
        if let Some(w) = config.backend.weights_path.as_mut() {
            resolve(w);
        }
        if let Some(s) = config.evaluation.suite.as_mut() {
            resolve(s);
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.concept.concept_id.trim().is_empty() {
            return Err(Error::InvalidConfig("concept.concept_id must not be empty".into()));
        }
        self.concept.validate_shape()?;
        match self.backend.kind {
            BackendKind::Toy => self.backend.toy.validate()?,
            BackendKind::Pretrained => {
                if self.backend.weights_path.is_none() {
                    return Err(Error::InvalidConfig("backend.weights_path is required for the pretrained backend".into()));
                }
            }
        }
        for plan in self.schedule() {
            plan.validate()?;
        }
        let adam = &self.training.adam;
        if !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) {
            return Err(Error::InvalidConfig("training.adam.beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(adam.eps > 0.0) || !(adam.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("training.adam.eps must be > 0 and weight_decay >= 0".into()));
        }
        let eval = &self.evaluation;
        if eval.images_per_prompt == 0 || eval.sampling_steps == 0 {
            return Err(Error::InvalidConfig("evaluation.images_per_prompt and sampling_steps must be >= 1".into()));
        }
        if !eval.guidance_scale.is_finite() {
            return Err(Error::InvalidConfig("evaluation.guidance_scale must be finite".into()));
        }
        Ok(())
    }

    /// The stages this config trains, defaults plus overrides.
    pub fn schedule(&self) -> Vec<StagePlan> {
        match self.training.mode {
            TrainingMode::Staged => {
                let mut plans = default_schedule();
                let overrides = [&self.training.stage1, &self.training.stage2, &self.training.stage3];
                for (plan, o) in plans.iter_mut().zip(overrides) {
                    o.apply(plan);
                }
                plans.to_vec()
            }
            TrainingMode::Baseline => {
                let mut plan = baseline_plan();
                self.training.baseline.apply(&mut plan);
                vec![plan]
            }
        }
    }

    pub fn stage_override_mut(&mut self, stage: StageId) -> &mut StageOverride {
        match stage {
            StageId::Stage1 => &mut self.training.stage1,
            StageId::Stage2 => &mut self.training.stage2,
            StageId::Stage3 => &mut self.training.stage3,
            StageId::Baseline => &mut self.training.baseline,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            pooling: self.training.pooling,
            detach_category: self.training.detach_category,
            hflip: self.training.hflip,
            adam: self.training.adam,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.evaluation.sampling_steps, guidance_scale: self.evaluation.guidance_scale }
    }

    /// `output_dir`, unless the run-dir environment variable is set.
    pub fn effective_run_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
