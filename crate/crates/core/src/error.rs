//! Error taxonomy shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Input lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A hyperparameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// The experiment or layer configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A text record could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A record violates the file schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A binary payload does not match the declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A numeric quantity became non-finite during computation.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        Error::Dimension {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
