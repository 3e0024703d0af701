use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// The CLI maps these onto process exit codes, so variants are grouped by
/// what went wrong rather than by where.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("numerical abort at step {step}: {detail}")]
    NumericalAbort { step: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible operands at {param}: {detail}")]
    Incompatible { param: String, detail: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn incompatible(param: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Incompatible {
            param: param.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
