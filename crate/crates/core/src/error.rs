use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quaternion: norm is zero")]
    DegenerateQuaternion,

    #[error("quaternion is not unit length (norm {norm})")]
    NonUnitQuaternion { norm: f64 },

    #[error("PLY parse error at byte {offset}: {message}")]
    PlyParse { offset: usize, message: String },

    #[error("PLY schema error: missing or invalid property `{property}`")]
    PlySchema { property: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("tape does not match the current network parameters (tape version {tape}, network version {network})")]
    StaleTape { tape: u64, network: u64 },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("match database is empty")]
    EmptyDatabase,

    #[error("need at least {required} points, got {actual}")]
    TooFewPoints { required: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: total loss {loss} exceeded 10x the reference {reference} for {window} consecutive iterations")]
    Diverged {
        iteration: usize,
        loss: f64,
        reference: f64,
        window: usize,
    },

    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        iteration: usize,
        last_good: Option<PathBuf>,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
