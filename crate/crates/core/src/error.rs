//! One error type for the whole crate.
//!
//! Every failure carries enough context to act on: shape errors name the
//! operation and the offending shapes, file errors name the path, and
//! numeric aborts say where the non-finite value appeared.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was applied to tensors whose shapes do not fit.
    #[error("{primitive}: {detail}")]
    Shape {
        primitive: &'static str,
        detail: String,
    },

    /// A primitive name that the graph does not know.
    #[error("unknown primitive {0:?}")]
    UnknownPrimitive(String),

    /// A measure query that the information module does not know.
    #[error("unknown measure {0:?}")]
    UnknownMeasure(String),

    /// A variable name absent from a joint table.
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),

    /// Backward pass requested from a non-scalar node.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// A non-finite value appeared where the pipeline must abort.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid argument or configuration value; message names the field.
    #[error("{0}")]
    Invalid(String),

    /// A data file did not match its declared format.
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// I/O failure with the path attached.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            primitive,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::Invalid(detail.into())
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
