use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("patch size {p} does not divide image extents H={h}, W={w}")]
    PatchDivisibility { h: usize, w: usize, p: usize },

    #[error("channel extent {channels} is not divisible by P^2 = {p2}")]
    ChannelDivisibility { channels: usize, p2: usize },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("prediction kind mismatch: {0:?} vs {1:?}")]
    KindMismatch(crate::param::PredictionKind, crate::param::PredictionKind),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: malformed at byte {offset}: {reason}")]
    Malformed {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("blob format: {0}")]
    Blob(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
