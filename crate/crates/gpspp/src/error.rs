//! Crate-wide error type.

/// Errors produced by dataset ingestion, the autodiff engine, the model and
/// the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed dataset record; `line` is 1-based within the file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    /// Incompatible tensor shapes fed to an autodiff op.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    #[error("numeric: {0}")]
    Numeric(String),

    /// Masking-group contract violated (e.g. positions required but absent).
    #[error("masking: {0}")]
    Masking(String),

    /// A single graph does not fit the pack capacity.
    #[error("graph {index} exceeds pack capacity: {details}")]
    Oversize { index: usize, details: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
