//! Crate-wide error type. Numeric contract violations (shape mismatches,
//! non-finite values) and I/O/format failures all surface here; nothing
//! panics on user input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents incompatible with the requested operation.
    #[error("shape mismatch in {context}: {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },

    /// A NaN or infinity appeared where the numeric contract forbids it.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An API precondition was violated (empty input, missing grad, bad argument).
    #[error("{0}")]
    Contract(String),

    /// Binary format violation (IDX or checkpoint), with the byte offset of the problem.
    #[error("{path}: {detail} at byte offset {offset}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Configuration file or key/value parse failure.
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
