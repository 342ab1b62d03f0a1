//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScarfError {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data failed validation (duplicate ids, unknown categories, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A non-finite value appeared where the contract requires finite data.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, ScarfError>;

impl ScarfError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        ScarfError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
