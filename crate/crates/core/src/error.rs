//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate parameter name: {0}")]
    DuplicateParameter(String),

    #[error("unknown parameter name: {0}")]
    UnknownParameter(String),

    #[error("dataset not found: {0}")]
    DatasetNotFound(String),

    #[error("csv parse error in {path} row {row}, column {column}: {message}")]
    CsvCell {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("csv structure error in {path}: {message}")]
    CsvStructure { path: String, message: String },

    #[error("timestamps not strictly increasing at row {row} of {path}")]
    TimestampOrder { path: String, row: usize },

    #[error("timestamp gap at row {row} of {path}: expected spacing {expected_s}s, found {found_s}s")]
    TimestampGap {
        path: String,
        row: usize,
        expected_s: i64,
        found_s: i64,
    },

    #[error("dataset too short: {0}")]
    DatasetTooShort(String),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("non-stationary coefficients: {0}")]
    NonStationary(String),

    #[error("reference forward ceiling exceeded: C*N*D = {actual} > {ceiling}")]
    OracleCeiling { actual: usize, ceiling: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for CLI use: 2 for bad input/config, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::NonScalarLoss { .. }
            | Error::InvalidConfig(_)
            | Error::DuplicateParameter(_)
            | Error::UnknownParameter(_)
            | Error::DatasetNotFound(_)
            | Error::CsvCell { .. }
            | Error::CsvStructure { .. }
            | Error::TimestampOrder { .. }
            | Error::TimestampGap { .. }
            | Error::DatasetTooShort(_)
            | Error::EmptyEvalSet
            | Error::NonStationary(_)
            | Error::OracleCeiling { .. }
            | Error::CheckpointFormat(_) => 2,
            Error::Divergence { .. } | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
