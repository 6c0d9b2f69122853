use thiserror::Error;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite values produced at {node}")]
    NonFinite { node: String },
    #[error("backward requires a single-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument at {node}: {detail}")]
    InvalidArgument { node: String, detail: String },
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
}
