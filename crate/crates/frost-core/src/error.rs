//! Crate-wide error type.

/// Errors surfaced by tensors, models, data generation, and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// An input value lies outside the operation's domain.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A scalar parameter (temperature, step size, ...) is invalid.
    #[error("invalid parameter {name}: {detail}")]
    Param { name: &'static str, detail: String },

    /// Structured input failed a contract check (bad one-hot row, label
    /// out of range, ragged matrix, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// A requested class id is not present.
    #[error("unknown class id {0}")]
    UnknownClass(usize),

    /// A document (JSON checkpoint, CSV table, ...) could not be decoded.
    #[error("parse error: {0}")]
    Parse(String),

    /// Training produced a non-finite loss term.
    #[error("training diverged: non-finite {term} loss at epoch {epoch}")]
    Diverged { term: &'static str, epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
