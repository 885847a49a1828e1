use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {path}: {reason}")]
    MissingFile { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image decode/encode failed: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dimension mismatch for {id}: {expected:?} vs {found:?}")]
    DimensionMismatch {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("stale artifact {path}: built with config {found}, current config is {expected}")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown feature type id {0}")]
    UnknownFeature(usize),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::MissingFile { .. } => "missing_file",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::StaleArtifact { .. } => "stale_artifact",
            Error::Degenerate(_) => "degenerate_input",
            Error::UnknownFeature(_) => "unknown_feature",
            Error::Serde(_) => "serialization",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile {
                path: path.into(),
                reason: source.to_string(),
            };
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
