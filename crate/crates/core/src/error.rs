//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Numeric kernels never
//! panic on bad input and never let NaN/Inf pass silently: they report
//! one of the variants below instead.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced a NaN or infinity.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is outside its documented range.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset, checkpoint, or other artifact failed to load or validate.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
