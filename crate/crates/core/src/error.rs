use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: required column `{column}` not found in header")]
    Schema { column: String },

    #[error("{rejected} of {total} rows rejected (more than half); refusing to continue")]
    TooManyRejects { rejected: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty population for percentile rank")]
    EmptyPopulation,

    #[error("no usable items for the design matrix")]
    NoUsableItems,

    #[error("no deactivation events in the training data")]
    NoEvents,

    #[error("non-finite value in {0}; rescale covariates or increase the ridge penalty")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no positive interactions to train on")]
    NoPositives,

    #[error("no external score for request `{request}` and item `{item}`")]
    MissingScore { request: String, item: String },

    #[error("key sets differ between backbone scores and timeliness values (item `{0}`)")]
    KeyMismatch(String),

    #[error("need at least {needed} items for bucket evaluation, got {got}")]
    InsufficientItems { needed: usize, got: usize },

    #[error("request `{0}` has no ground-truth positive")]
    MissingTruth(String),

    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("config hash mismatch for stage `{stage}` (manifest {recorded}, current {current}); pass --force to overwrite")]
    ConfigHashMismatch {
        stage: String,
        recorded: String,
        current: String,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-parseable class name, used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Schema { .. } => "schema",
            Error::TooManyRejects { .. } => "too_many_rejects",
            Error::InvalidConfig(_) => "invalid_config",
            Error::EmptyPopulation => "empty_population",
            Error::NoUsableItems => "no_usable_items",
            Error::NoEvents => "no_events",
            Error::NonFinite(_) => "non_finite",
            Error::Dimension { .. } => "dimension",
            Error::NoPositives => "no_positives",
            Error::MissingScore { .. } => "missing_score",
            Error::KeyMismatch(_) => "key_mismatch",
            Error::InsufficientItems { .. } => "insufficient_items",
            Error::MissingTruth(_) => "missing_truth",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::ConfigHashMismatch { .. } => "config_hash_mismatch",
            Error::Parse(_) => "parse",
        }
    }
}
