use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance of component {index} is not symmetric positive definite")]
    NotSpd { index: usize },

    #[error("no component matches condition {0}")]
    NoMatchingComponent(String),

    #[error("condition {cond} is outside the embedding table (concepts {concepts}, attributes {attributes})")]
    ConditionOutOfRange {
        cond: String,
        concepts: usize,
        attributes: usize,
    },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite value at batch index {index}")]
    NonFiniteBatch { index: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("sampler produced a non-finite state at step {step} ({context})")]
    NonFiniteState { step: usize, context: String },

    #[error("guidance requires a token condition, got the null condition")]
    NullGuidanceCondition,

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {message}\nconfig: {config}")]
    Stage {
        stage: String,
        message: String,
        config: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from a bad config (CLI exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
