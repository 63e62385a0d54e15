use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("missing value at row {row}, column {column}")]
    MissingValue { row: usize, column: String },
    #[error("non-numeric value {value:?} at row {row}, column {column}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("non-binary target {value:?} at row {row}")]
    NonBinaryTarget { row: usize, value: String },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("target column {0:?} not found")]
    MissingTarget(String),
    #[error("degenerate feature: zero spread")]
    DegenerateFeature,
    #[error("degenerate targets: {0}")]
    DegenerateTargets(String),
    #[error("normalization undefined: base rate is 1")]
    NormalizationUndefined,
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("row width {got} does not match the {expected} features the model was trained on")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("too many features for exact enumeration ({0} > 12); use owen values or sampling")]
    TooManyFeatures(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by a bad configuration document or argument.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    /// Errors caused by the input dataset itself.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::MissingValue { .. }
                | Error::NonNumeric { .. }
                | Error::NonBinaryTarget { .. }
                | Error::DuplicateColumn(_)
                | Error::MissingTarget(_)
                | Error::DegenerateTargets(_)
                | Error::Csv(_)
        )
    }
}
