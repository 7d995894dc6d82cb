//! Error taxonomy shared by the library and the CLI.
//!
//! Every failure belongs to one of four classes, and each class maps onto a
//! fixed process exit code so scripted callers can dispatch on it.

use thiserror::Error;

/// Machine-readable sub-code for data-file problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataErrorKind {
    /// Header or column layout does not match the documented schema.
    SchemaMismatch,
    /// A cell failed to parse as a number.
    NonNumericCell,
    /// Per-row threshold ordering `L <= l <= u <= U` violated.
    OrderingViolation,
    /// An observed output falls outside its clamp range.
    OutOfRange,
    /// Step indices are not contiguous from zero.
    NonContiguousIndex,
    /// Row width or vector length inconsistent with the declared dimension.
    DimensionMismatch,
}

impl DataErrorKind {
    pub fn code(&self) -> &'static str {
        match self {
            DataErrorKind::SchemaMismatch => "schema_mismatch",
            DataErrorKind::NonNumericCell => "non_numeric_cell",
            DataErrorKind::OrderingViolation => "ordering_violation",
            DataErrorKind::OutOfRange => "out_of_range",
            DataErrorKind::NonContiguousIndex => "non_contiguous_index",
            DataErrorKind::DimensionMismatch => "dimension_mismatch",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, construction parameters, or operation misuse.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data; `location` names the line or step.
    #[error("data error [{}] at {location}: {msg}", kind.code())]
    Data {
        kind: DataErrorKind,
        location: String,
        msg: String,
    },

    /// A numeric procedure failed to converge or lost validity.
    #[error("numeric failure: {msg}")]
    Numeric { msg: String, achieved: Option<f64> },

    /// A standing model assumption is violated by the supplied problem.
    #[error("assumption violation: {0}")]
    Assumption(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => Error::Config(format!("csv io: {e}")),
            _ => Error::Data {
                kind: DataErrorKind::SchemaMismatch,
                location: e
                    .position()
                    .map_or_else(|| "unknown".to_string(), |p| format!("line {}", p.line())),
                msg: e.to_string(),
            },
        }
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(kind: DataErrorKind, location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            kind,
            location: location.into(),
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            msg: msg.into(),
            achieved: None,
        }
    }

    pub fn numeric_with(msg: impl Into<String>, achieved: f64) -> Self {
        Error::Numeric {
            msg: msg.into(),
            achieved: Some(achieved),
        }
    }

    pub fn assumption(msg: impl Into<String>) -> Self {
        Error::Assumption(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 5 assumption.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } => 3,
            Error::Io(_) => 3,
            Error::Numeric { .. } => 4,
            Error::Assumption(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
