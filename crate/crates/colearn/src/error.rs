use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An architecture whose layers do not compose.
    #[error("architecture error: {0}")]
    Arch(String),

    /// Invalid configuration value(s).
    #[error("config error: {0}")]
    Config(String),

    /// An API precondition was violated (stale cache, wrong ensemble size, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss; aborts the run.
    #[error("non-finite loss in network {network} at epoch {epoch}, batch {batch}")]
    NonFinite {
        network: usize,
        epoch: usize,
        batch: usize,
    },

    /// A file did not match its expected on-disk format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
