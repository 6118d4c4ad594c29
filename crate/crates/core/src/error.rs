use thiserror::Error;

/// Errors raised anywhere in the model, data and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("function returned different values for identical inputs")]
    NonDeterministic,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
