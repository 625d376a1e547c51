use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpilError>;

#[derive(Debug, Error)]
pub enum SpilError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward: {0}")]
    Backward(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed for `{video_id}`: {message}")]
    Validation { video_id: String, message: String },

    #[error("empty point cloud for `{0}`")]
    EmptyCloud(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SpilError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpilError::Io {
            path: path.into(),
            source,
        }
    }
}
