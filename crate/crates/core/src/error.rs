use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("missing data file {0}")]
    MissingFile(PathBuf),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tags an error with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage { stage: stage.to_string(), source: Box::new(other) },
        }
    }

    /// True for errors caused by the configuration rather than a stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnknownDataset(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
