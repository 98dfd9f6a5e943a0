use thiserror::Error;

/// Errors surfaced by model construction, rendering, IO and training.
#[derive(Debug, Error)]
pub enum CkmError {
    #[error("coordinate out of range: {0}")]
    Range(String),

    #[error("octree topology error: {0}")]
    Topology(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CkmError>;
