use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("implied covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unsupported model schema version {found} (this build reads version {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("{count} row(s) with missing values; first at row {row}, column '{column}'")]
    MissingValues {
        count: usize,
        row: usize,
        column: String,
    },

    #[error("non-numeric value '{value}' at row {row}, column '{column}'")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("column '{0}' named in the role config is not in the data")]
    UnknownColumn(String),

    #[error("column '{0}' has no role in the role config")]
    UnassignedColumn(String),

    #[error("invalid role config: {0}")]
    RoleConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("unknown sensitive level '{0}'")]
    UnknownLevel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("observed information matrix is singular or not positive definite")]
    SingularInformation,

    #[error("models are not nested: {0}")]
    NotNested(String),

    #[error("optimizer did not converge: {0}")]
    NotConverged(String),

    #[error("lasso coordinate descent did not converge after {0} sweeps")]
    LassoNoConvergence(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
