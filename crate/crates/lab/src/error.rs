use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] lesion_synth_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: payload has {actual} bytes, header implies {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: non-finite value at flat index {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            LabError::MissingFile(path)
        } else {
            LabError::Io { path, source }
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Core(lesion_synth_core::Error::UnknownMethod { .. }) => "unknown_method",
            LabError::Core(_) => "engine",
            LabError::Io { .. } => "io",
            LabError::MissingFile(_) => "missing_file",
            LabError::PayloadSize { .. } => "payload_size",
            LabError::NonFinite { .. } => "non_finite",
            LabError::Format { .. } => "format",
            LabError::Config(_) => "config",
            LabError::MissingCheckpoint(_) => "missing_checkpoint",
            LabError::Invalid(_) => "invalid",
            LabError::Image(_) => "image",
        }
    }
}

/// Error body printed on stderr by the CLI.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: String,
    pub kind: String,
}

impl ErrorReport {
    pub fn from_anyhow(err: &anyhow::Error) -> Self {
        let kind = err
            .downcast_ref::<LabError>()
            .map(LabError::kind)
            .unwrap_or("other");
        Self {
            error: format!("{err:#}"),
            kind: kind.to_string(),
        }
    }
}
