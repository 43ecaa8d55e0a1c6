use thiserror::Error;

/// Errors produced by tape construction, backward passes, optimization and
/// checkpoint I/O.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("backward reached non-differentiable op `{op}` on the gradient path")]
    NonDifferentiable { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("gradient for `{name}` contains NaN; no update applied")]
    NanGradient { name: String },

    #[error("unknown parameter `{name}`")]
    UnknownParameter { name: String },

    #[error("duplicate parameter `{name}`")]
    DuplicateParameter { name: String },

    #[error("{0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
