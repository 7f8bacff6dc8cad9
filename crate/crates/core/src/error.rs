// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum CarlaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A failure inside one pipeline stage, tagged with where it happened.
    #[error("[{stage}] {entity}: {source}")]
    Stage {
        stage: String,
        entity: String,
        #[source]
        source: Box<CarlaError>,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl CarlaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CarlaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str, entity: &str) -> Self {
        CarlaError::Stage {
            stage: stage.to_string(),
            entity: entity.to_string(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            CarlaError::Config(_) => ErrorKind::Usage,
            CarlaError::Numeric(_) => ErrorKind::Numeric,
            CarlaError::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, CarlaError>;
