use std::io;

/// Errors produced anywhere in the modeling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed text input, with the 1-based line it was found on.
    #[error("{message} at line {line}")]
    Parse { line: usize, message: String },

    /// A parameter or argument outside its valid domain.
    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    /// Binary data that does not follow one of the file formats.
    #[error("{0}")]
    Format(String),

    /// Tensors or grids whose dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced NaN or infinity. `batch` is `None` when the test
    /// evaluation after the epoch was the first to fail.
    #[error("non-finite loss at epoch {epoch}, {}", match batch {
        Some(b) => format!("batch {b}"),
        None => "test evaluation".to_string(),
    })]
    NonFinite { epoch: usize, batch: Option<usize> },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid { what, message: message.into() }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
