use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("placeholder token {0:?} already exists in the vocabulary")]
    PlaceholderCollision(String),
    #[error("super-category {category:?} tokenizes to {count} tokens, expected exactly one existing token")]
    MultiTokenCategory { category: String, count: usize },
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for an all-zero vector")]
    ZeroVector,

    #[error("a capture session is already active on this backend")]
    SessionAlreadyActive,
    #[error("capture session recorded no forward passes")]
    EmptySession,
    #[error("token role {0:?} is not present in the attention map set")]
    UnknownTokenRole(String),
    #[error("attention map set is missing token role {0:?}")]
    MissingTokenRole(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite loss at stage {stage}, step {step}: diffusion={diffusion}, reg={reg}")]
    NonFiniteLoss { stage: String, step: usize, diffusion: f64, reg: f64 },

    #[error("no decodable images found in {0}")]
    EmptyImageSet(PathBuf),
    #[error("timestep {t} out of range for schedule with {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("backend {backend} does not support {operation}")]
    BackendUnsupported { backend: String, operation: String },
    #[error("cannot resolve trainable scope: {0}")]
    ScopeResolutionFailure(String),
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
    #[error("sampling failed: {0}")]
    SamplingFailure(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("malformed artifact {path}: {reason}")]
    MalformedArtifact { path: PathBuf, reason: String },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure { path: path.into(), source }
    }
}
