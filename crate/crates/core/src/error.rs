use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator, trainer and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent or invalid configuration (grids, wavelengths, shapes).
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary file did not match its declared format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    /// A non-finite value showed up during optimization.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss in epoch index {epoch}, batch index {batch} (both 0-based)")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
