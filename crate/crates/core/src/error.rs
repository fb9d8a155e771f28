use thiserror::Error;

/// Errors produced by estimation, simulation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("duplicate patient id `{0}`")]
    DuplicateId(String),

    #[error("stage {stage} out of range (dataset has {stages} stages)")]
    StageOutOfRange { stage: usize, stages: usize },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("feature `{column}` is missing for row {row}")]
    MissingFeature { row: usize, column: String },

    #[error("singular weighted design: null-space dimension {nullity} of {columns} columns")]
    SingularDesign { nullity: usize, columns: usize },

    #[error(
        "degenerate bandwidth: conditioning column {column} is constant; drop it from the conditioning set"
    )]
    DegenerateBandwidth { column: usize },

    #[error("no respondents in the profiling sample")]
    NoRespondents,

    #[error("no nonrespondents in the profiling sample")]
    NoNonrespondents,

    #[error("exp(gamma * y) overflowed at gamma = {gamma}; rescale gamma or standardize the pseudo-outcome")]
    Overflow { gamma: f64 },

    #[error("moment conditions are under-identified: {0}")]
    UnderIdentified(String),

    #[error("fewer than {k} donors ({donors}) for imputing column `{column}`")]
    InsufficientDonors {
        column: String,
        donors: usize,
        k: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{failed} of {total} bootstrap resamples failed (limit 20%)")]
    BootstrapFailures { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
