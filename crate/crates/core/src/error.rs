use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by how the CLI reports them: validation problems
/// exit with code 2, numerical failures with code 3.
#[derive(Debug, Error)]
pub enum AlamError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("checkpoint blob `{blob}` is corrupt: {reason}")]
    CorruptBlob { blob: String, reason: String },

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    OutputExists(PathBuf),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl AlamError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AlamError::Invalid(msg.into())
    }

    pub fn non_finite(what: impl Into<String>) -> Self {
        AlamError::NonFinite { what: what.into() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AlamError::NonFinite { .. } => 3,
            AlamError::Tensor(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = AlamError> = std::result::Result<T, E>;
