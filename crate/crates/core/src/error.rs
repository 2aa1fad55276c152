//! Error type shared across the engine.

use thiserror::Error;

/// All failure modes the engine surfaces to callers.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or frame dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An index (class label, frame position) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file could not be parsed.
    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: String,
        location: String,
        message: String,
    },

    /// Parsed data violates a dataset-level invariant.
    #[error("schema error: {0}")]
    Schema(String),

    /// Annotation spans are malformed (overlap, out of bounds).
    #[error("annotation error: {0}")]
    Annotation(String),

    /// Model file has an unknown magic or unsupported version.
    #[error("version error: {0}")]
    Version(String),

    /// A temporal span is malformed.
    #[error("span error: {0}")]
    Span(String),

    /// Evaluation protocol violated (empty test set, missing traces, reused session).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
