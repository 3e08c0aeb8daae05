use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected dimension {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("degenerate validation set: {0}")]
    DegenerateValidation(String),

    #[error("degenerate class composition: {0}")]
    DegenerateClass(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("feature mode error: {0}")]
    Mode(String),

    #[error("{path}:{line}: {field}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InputShape { .. } => "input-shape",
            Error::NumericOverflow(_) => "numeric-overflow",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::DegenerateValidation(_) => "degenerate-validation",
            Error::DegenerateClass(_) => "degenerate-class",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Mode(_) => "mode",
            Error::Parse { .. } => "parse",
            Error::Stage { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
