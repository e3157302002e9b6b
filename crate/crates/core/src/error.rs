use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("corpus is empty; nothing to split")]
    EmptyCorpus,
    #[error("split ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),
    #[error("image skipped: {0}")]
    Skipped(String),
    #[error("unknown comparator or encoder: {0}")]
    Registry(String),
    #[error("evaluation protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config hash mismatch: checkpoint has {checkpoint}, config has {config}")]
    HashMismatch { checkpoint: String, config: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable tag used by the command-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::EmptyCorpus => "empty_corpus",
            Error::InvalidRatio(_) => "invalid_ratio",
            Error::Skipped(_) => "skipped",
            Error::Registry(_) => "registry",
            Error::Protocol(_) => "protocol",
            Error::Config(_) => "config",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence(_) => "divergence",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
