use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("unknown unlearning method `{0}`")]
    UnknownMethod(String),

    #[error("corrupt or missing data at {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged ({stage}, epoch {epoch}): loss {loss}")]
    Divergence { stage: String, epoch: usize, loss: f64 },

    #[error("catastrophic collapse during {stage}: replay batch accuracy {accuracy:.1}% at step {step}")]
    Collapse { stage: String, step: usize, accuracy: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("normalization stats mismatch: predictor expects {expected}, features carry {actual}")]
    StatsMismatch { expected: String, actual: String },

    #[error("count mismatch: expected {expected}, got {actual}")]
    CountMismatch { expected: usize, actual: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{0}")]
    Format(String),

    #[error("stage `{stage}` failed for {run}: {source}")]
    Stage {
        stage: String,
        run: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Name of the failing pipeline stage, if the error came from one.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Format(format!("toml: {e}"))
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Format(format!("toml: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(format!("csv: {e}"))
    }
}
