use std::path::PathBuf;

use jscc_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate latent: norm {0:e} is below 1e-12")]
    DegenerateLatent(f64),
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Whether the error stems from invalid user input rather than a failure
    /// while executing valid input.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
