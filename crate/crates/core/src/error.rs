use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no events: at least one uncensored record is required")]
    NoEvents,

    #[error("insufficient events: need at least {needed}, found {found}")]
    InsufficientEvents { needed: usize, found: usize },

    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("invalid cut points: {0}")]
    InvalidCuts(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("cause {cause} out of range 1..={n_causes}")]
    CauseOutOfRange { cause: usize, n_causes: usize },

    #[error("non-finite hazard at row {row}")]
    NonFiniteHazard { row: usize },

    #[error("non-finite log-hazard: {0}")]
    NonFiniteLogHazard(String),

    #[error("negative hazard {value} in interval {interval}")]
    NegativeHazard { interval: usize, value: f64 },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("validation split is empty")]
    EmptyValidation,

    #[error("all {0} grid points failed")]
    GridFailed(usize),

    #[error("parse error at line {line}, column `{column}`: {reason}")]
    Parse {
        line: usize,
        column: String,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures as opposed to bad input or too little data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteHazard { .. }
                | Error::NonFiniteLogHazard(_)
                | Error::Divergence { .. }
                | Error::GridFailed(_)
        )
    }

    pub fn is_data_insufficiency(&self) -> bool {
        matches!(
            self,
            Error::NoEvents | Error::InsufficientEvents { .. } | Error::EmptyValidation
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
