//! Crate error type.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors surfaced by the engine. Row numbers are 1-based positions in the
/// source the record came from (CSV line numbers when parsed from a file).
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A required input column is absent.
    MissingColumn { name: String },
    /// A cell failed numeric parsing.
    BadNumber { row: usize, column: String },
    /// Timestamps within a session must be strictly increasing.
    NonIncreasingTime { session: String, row: usize },
    /// Physiological values must be strictly positive so logs are defined.
    NonPositiveValue { row: usize, column: String, value: f64 },
    /// Smoothing window must be an odd integer >= 1.
    BadWindow { window: usize },
    /// Session referenced by a record has no metadata.
    MissingSessionMeta { session: String },
    /// Patient referenced by a record or session has no metadata.
    MissingPatientMeta { patient: String },
    /// A metadata field is outside its valid range.
    BadMeta { field: String, detail: String },
    /// Hyperparameter or prior value out of range.
    BadParam { name: String, value: f64 },
    /// Time step must be strictly positive.
    BadTimeStep { dt: f64 },
    /// A time grid was empty or not strictly increasing.
    BadTimeGrid,
    /// Path times and values have different lengths.
    LengthMismatch { left: usize, right: usize },
    /// Cholesky factorization failed (reported with the hyperparameter point).
    Factorization { detail: String },
    /// The operation needs responses but the frame has none.
    NoResponse,
    /// Frame is empty.
    EmptyFrame,
    /// Prediction frame was built with different centering constants.
    CenteringMismatch,
    /// Patient id not present in the fitted model.
    UnknownPatient { patient: String },
    /// Session id not present in the fitted model.
    UnknownSession { session: String },
    /// Session id not present in the dataset.
    SessionNotFound { session: String },
    /// Cut time outside the target session's time span.
    CutOutsideSpan { t_cut: f64, start: f64, end: f64 },
    /// Cross-validation needs at least two patients.
    TooFewPatients { found: usize },
    /// Invalid generative or run configuration.
    BadConfig { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::MissingColumn { name } => write!(f, "missing required column `{name}`"),
            Error::BadNumber { row, column } => {
                write!(f, "row {row}: column `{column}` is not a valid number")
            }
            Error::NonIncreasingTime { session, row } => write!(
                f,
                "row {row}: timestamps in session `{session}` must be strictly increasing"
            ),
            Error::NonPositiveValue { row, column, value } => write!(
                f,
                "row {row}: column `{column}` must be strictly positive, got {value}"
            ),
            Error::BadWindow { window } => {
                write!(f, "smoothing window must be odd and >= 1, got {window}")
            }
            Error::MissingSessionMeta { session } => {
                write!(f, "no metadata for session `{session}`")
            }
            Error::MissingPatientMeta { patient } => {
                write!(f, "no metadata for patient `{patient}`")
            }
            Error::BadMeta { field, detail } => write!(f, "invalid metadata `{field}`: {detail}"),
            Error::BadParam { name, value } => {
                write!(f, "parameter `{name}` out of range: {value}")
            }
            Error::BadTimeStep { dt } => write!(f, "time step must be positive, got {dt}"),
            Error::BadTimeGrid => write!(f, "times must be non-empty and strictly increasing"),
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::Factorization { detail } => write!(f, "factorization failed: {detail}"),
            Error::NoResponse => write!(f, "frame carries no response values"),
            Error::EmptyFrame => write!(f, "frame has no rows"),
            Error::CenteringMismatch => write!(
                f,
                "prediction frame was not built with the fit's centering constants"
            ),
            Error::UnknownPatient { patient } => {
                write!(f, "patient `{patient}` is not part of the fitted model")
            }
            Error::UnknownSession { session } => {
                write!(f, "session `{session}` is not part of the fitted model")
            }
            Error::SessionNotFound { session } => {
                write!(f, "session `{session}` not found in the dataset")
            }
            Error::CutOutsideSpan { t_cut, start, end } => write!(
                f,
                "cut time {t_cut} outside the session span [{start}, {end}]"
            ),
            Error::TooFewPatients { found } => {
                write!(f, "cross-validation needs >= 2 patients, found {found}")
            }
            Error::BadConfig { detail } => write!(f, "invalid configuration: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
