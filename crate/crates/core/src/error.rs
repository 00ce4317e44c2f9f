use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Dataset,
    Model,
    Media,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown source label id {id} (expected 0..=18)")]
    UnknownSourceLabel { id: u8 },
    #[error("label {label} outside 0..=10")]
    LabelOutOfRange { label: u8 },
    #[error("{what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("need at least {needed} samples, found {found}")]
    NotEnoughSamples { needed: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash {found} does not match current config {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("checkpoint is missing {missing:?}")]
    MissingCheckpointFiles { missing: Vec<String> },
    #[error("model: {0}")]
    Model(String),
    #[error("unsupported media {path}: supported inputs are {supported}")]
    UnsupportedMedia {
        path: PathBuf,
        supported: &'static str,
    },
    #[error("media: {0}")]
    Media(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::UnknownSourceLabel { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Dataset(_)
            | Error::NotEnoughSamples { .. } => ErrorCategory::Dataset,
            Error::Checkpoint(_)
            | Error::ConfigHashMismatch { .. }
            | Error::MissingCheckpointFiles { .. }
            | Error::Model(_)
            | Error::ShapeMismatch { .. } => ErrorCategory::Model,
            Error::UnsupportedMedia { .. } | Error::Media(_) | Error::Image(_) => {
                ErrorCategory::Media
            }
            Error::Io { .. } | Error::Json(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
