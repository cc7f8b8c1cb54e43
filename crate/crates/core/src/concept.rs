//! Placeholder-token injection, embedding snapshots and drift diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{DiffusionBackend, TokenId, Tokenizer, TOKEN_EMBEDDINGS};
use crate::error::{Error, Result};
use crate::tensor::cosine_similarity;

pub const DEFAULT_PLACEHOLDER: &str = "[V]";
pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {placeholder} {super_category}";

/// Drift at or above this after joint training signals that the embedding barely moved.
pub const UNDER_LEARNING_DRIFT: f64 = 0.999;

fn default_placeholder() -> String {
    DEFAULT_PLACEHOLDER.to_string()
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub concept_id: String,
    pub image_dir: PathBuf,
    #[serde(default = "default_placeholder")]
    pub placeholder: String,
    pub super_category: String,
    #[serde(default = "default_template")]
    pub training_prompt: String,
}

impl ConceptSpec {
    pub fn new(concept_id: &str, image_dir: impl Into<PathBuf>, super_category: &str) -> Self {
        Self {
            concept_id: concept_id.to_string(),
            image_dir: image_dir.into(),
            placeholder: default_placeholder(),
            super_category: super_category.to_string(),
            training_prompt: default_template(),
        }
    }

    /// Checks the parts that do not need a vocabulary.
    pub fn validate_shape(&self) -> Result<()> {
        if self.placeholder.is_empty() || self.placeholder.split_whitespace().count() != 1 {
            return Err(Error::InvalidConfig(format!(
                "concept.placeholder must be a single non-empty word, got {:?}",
                self.placeholder
            )));
        }
        let words = self.super_category.split_whitespace().count();
        if words != 1 {
            return Err(Error::MultiTokenCategory { category: self.super_category.clone(), count: words });
        }
        for slot in ["{placeholder}", "{super_category}"] {
            if self.training_prompt.matches(slot).count() != 1 {
                return Err(Error::InvalidConfig(format!("concept.training_prompt must contain {slot} exactly once")));
            }
        }
        Ok(())
    }

    /// Resolves the super-category to its single vocabulary id.
    pub fn category_id(&self, tokenizer: &Tokenizer) -> Result<TokenId> {
        self.validate_shape()?;
        let ids = tokenizer.encode_words(&self.super_category);
        match ids.as_slice() {
            [id] if *id != tokenizer.unk_id() => Ok(*id),
            _ => Err(Error::MultiTokenCategory { category: self.super_category.clone(), count: 0 }),
        }
    }
}

/// The rendered training prompt and where the two regularized tokens sit in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPrompt {
    pub text: String,
    pub placeholder_position: usize,
    pub category_position: usize,
}

/// Renders the prompt template. Positions count the start token when the tokenizer emits one.
pub fn build_training_prompt(spec: &ConceptSpec, tokenizer: &Tokenizer) -> Result<TrainingPrompt> {
    spec.validate_shape()?;
    let text = spec
        .training_prompt
        .replace("{placeholder}", &spec.placeholder)
        .replace("{super_category}", &spec.super_category);
    let offset = usize::from(tokenizer.bos_id().is_some());
    let words: Vec<&str> = text.split_whitespace().collect();
    let find = |w: &str| words.iter().position(|x| *x == w);
    let placeholder_position = find(&spec.placeholder).expect("template contains placeholder") + offset;
    let category_position = words
        .iter()
        .enumerate()
        .position(|(i, w)| *w == spec.super_category && i + offset != placeholder_position)
        .expect("template contains category")
        + offset;
    Ok(TrainingPrompt { text, placeholder_position, category_position })
}

/// Identifies an injected placeholder token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHandle {
    pub token_id: TokenId,
    pub placeholder: String,
    pub category_id: TokenId,
}

/// Adds the placeholder to the vocabulary with a copy of the super-category embedding.
pub fn inject_concept_token(backend: &mut dyn DiffusionBackend, spec: &ConceptSpec) -> Result<TokenHandle> {
    spec.validate_shape()?;
    if backend.tokenizer().contains(&spec.placeholder) {
        return Err(Error::PlaceholderCollision(spec.placeholder.clone()));
    }
    let category_id = spec.category_id(backend.tokenizer())?;
    let dim = backend.embedding_dim();
    let table = backend
        .params_mut()
        .get_mut(TOKEN_EMBEDDINGS)
        .ok_or_else(|| Error::UnknownGroup(TOKEN_EMBEDDINGS.to_string()))?;
    if table.shape[0] * dim != table.values.len() {
        return Err(Error::DimensionMismatch { left: table.shape[0], right: table.values.len() / dim });
    }
    let row = table.values[category_id * dim..(category_id + 1) * dim].to_vec();
    table.values.extend_from_slice(&row);
    table.shape[0] += 1;
    let rows = table.shape[0];
    let token_id = backend.tokenizer_mut().add_token(&spec.placeholder)?;
    debug_assert_eq!(token_id + 1, rows, "vocabulary and embedding table out of step");
    Ok(TokenHandle { token_id, placeholder: spec.placeholder.clone(), category_id })
}

/// Reattaches a handle to an already-injected placeholder.
pub fn resolve_handle(backend: &dyn DiffusionBackend, spec: &ConceptSpec) -> Result<TokenHandle> {
    let token_id = backend
        .tokenizer()
        .id_of(&spec.placeholder)
        .ok_or_else(|| Error::UnknownTokenRole(spec.placeholder.clone()))?;
    Ok(TokenHandle { token_id, placeholder: spec.placeholder.clone(), category_id: spec.category_id(backend.tokenizer())? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSnapshot {
    pub token_id: TokenId,
    pub step: u64,
    pub vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotRecord {
    token_id: TokenId,
    step: u64,
    dim: usize,
}

impl EmbeddingSnapshot {
    /// Writes `<stem>.json` and a little-endian `f64` sidecar `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let json = stem.with_extension("json");
        let bin = stem.with_extension("bin");
        let record = SnapshotRecord { token_id: self.token_id, step: self.step, dim: self.vector.len() };
        fs::write(&json, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&json, e))?;
        let bytes: Vec<u8> = self.vector.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        Ok(json)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json = stem.with_extension("json");
        let bin = stem.with_extension("bin");
        let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let record: SnapshotRecord = serde_json::from_slice(&text)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != record.dim * 8 {
            return Err(Error::MalformedArtifact {
                path: bin,
                reason: format!("expected {} bytes for dim {}", record.dim * 8, record.dim),
            });
        }
        let vector = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { token_id: record.token_id, step: record.step, vector })
    }
}

/// Copies the current embedding row of `handle`.
pub fn snapshot_embedding(backend: &dyn DiffusionBackend, handle: &TokenHandle, step: u64) -> Result<EmbeddingSnapshot> {
    let dim = backend.embedding_dim();
    let table = backend.params().get(TOKEN_EMBEDDINGS).ok_or(Error::UnknownToken(handle.token_id))?;
    let rows = table.values.len() / dim;
    if handle.token_id >= rows {
        return Err(Error::UnknownToken(handle.token_id));
    }
    let vector = table.values[handle.token_id * dim..(handle.token_id + 1) * dim].to_vec();
    Ok(EmbeddingSnapshot { token_id: handle.token_id, step, vector })
}

/// Cosine similarity between two snapshots of the same token.
pub fn embedding_drift(a: &EmbeddingSnapshot, b: &EmbeddingSnapshot) -> Result<f64> {
    cosine_similarity(&a.vector, &b.vector)
}
