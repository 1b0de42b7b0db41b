use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("bin {bin} has no calibration points")]
    EmptyBin { bin: usize },

    #[error("group {group} has no calibration members")]
    EmptyGroup { group: i64 },

    #[error("Gram matrix is singular; use a ridge penalty > 0")]
    SingularGram,

    #[error(
        "rank-one update is numerically degenerate (denominator {denominator:e}); refit instead"
    )]
    DegenerateUpdate { denominator: f64 },

    #[error("solver did not converge after {iterations} iterations (optimality gap {gap:e})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("fit failed at imputed value {imputed}: {source}")]
    AtImputed {
        imputed: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("file {0} contains no data rows")]
    EmptyFile(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Tags an error with the imputed value; an already tagged error keeps
    /// its innermost location.
    pub(crate) fn at_imputed(self, imputed: f64) -> Self {
        if matches!(self, Error::AtImputed { .. }) {
            return self;
        }
        Error::AtImputed {
            imputed,
            source: Box::new(self),
        }
    }
}
