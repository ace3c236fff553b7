use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum VaderError {
    #[error("missing component: {}", .0.display())]
    MissingComponent(PathBuf),

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("value out of range: {0}")]
    ValueOutOfRange(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate token: pre-normalization norm {0:e} is below 1e-12")]
    DegenerateToken(f64),

    #[error("mining produced no usable samples: {0}")]
    EmptyMiningResult(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = VaderError> = std::result::Result<T, E>;

impl VaderError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed inputs or configuration rather
    /// than by a stage failing on well-formed data.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::MissingComponent(_)
                | Self::SchemaViolation(_)
                | Self::ValueOutOfRange(_)
                | Self::InvalidConfig(_)
                | Self::Parse { .. }
        )
    }
}
