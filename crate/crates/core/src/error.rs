use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),
    #[error("label {label} out of range for {channels} channels")]
    LabelOutOfRange { label: u32, channels: usize },
    #[error("union constraint violated: {0}")]
    UnionViolation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("non-finite loss at iteration {0}")]
    Diverged(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
