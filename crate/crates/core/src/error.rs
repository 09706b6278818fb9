//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the oracle, selection, decoding, predictor, and
/// verification layers.
#[derive(Debug, Error)]
pub enum Error {
    /// The revealed assignment has probability zero under the model joint.
    /// Such contexts are unreachable by correct decoding and signal a bug
    /// in the caller rather than a recoverable condition.
    #[error("conditioning event has zero probability under the model joint")]
    ZeroProbabilityContext,

    /// An exact enumeration would exceed the configured cap.
    #[error("enumeration of {needed} states exceeds cap {cap}")]
    EnumerationCapExceeded { needed: u128, cap: u128 },

    /// Two objects that must agree in shape do not.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation that requires at least one masked position was given none.
    #[error("mask set is empty")]
    EmptyMaskSet,

    /// A selector returned an empty set, violating the progress contract.
    #[error("selector returned no positions; decoding cannot progress")]
    NoProgress,

    /// Training was invoked on an empty cache.
    #[error("training cache contains no records")]
    EmptyCache,

    /// The training loss became NaN or infinite.
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    /// A persisted document carries an unsupported format version.
    #[error("format version mismatch: expected {expected}, found {found}")]
    FormatVersionMismatch { expected: u32, found: u32 },

    /// A configuration value violates its documented range or structure.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used by the CLI for error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ZeroProbabilityContext => "zero-probability-context",
            Error::EnumerationCapExceeded { .. } => "enumeration-cap-exceeded",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::EmptyMaskSet => "empty-mask-set",
            Error::NoProgress => "no-progress",
            Error::EmptyCache => "empty-cache",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::FormatVersionMismatch { .. } => "format-version-mismatch",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Io(_) => "io",
            Error::Json(_) => "serialization",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
