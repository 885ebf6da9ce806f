//! Crate-wide error type.
//!
//! Variants are grouped by the CLI exit code they map to: data problems
//! (exit 2), configuration problems (exit 3) and numerical failures (exit 4).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // --- data errors (exit 2) ---
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("required column `{0}` not found in input")]
    MissingColumn(String),
    #[error("duplicate record for patient `{patient}` at visit {visit}")]
    DuplicatePatientVisit { patient: String, visit: usize },
    #[error("patient `{patient}`: observation at visit {observed} after missing visit {gap} (strict monotone follow-up)")]
    NonMonotoneFollowUp {
        patient: String,
        gap: usize,
        observed: usize,
    },
    #[error("treatment arm must be coded 0 (reference) or 1 (active), got `{0}`")]
    ArmNotBinary(String),
    #[error("invalid value in column `{column}` for patient `{patient}`: {value}")]
    InvalidField {
        column: String,
        patient: String,
        value: String,
    },
    #[error("dataset invalid: {0}")]
    InvalidDataset(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("reference arm has no usable on-treatment data at visit {0}")]
    InsufficientReferenceData(usize),

    // --- configuration errors (exit 3) ---
    #[error("core model {core} is not nested within the {extension} compliance model")]
    NotNested { core: String, extension: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // --- numerical errors (exit 4) ---
    #[error("posterior precision matrix is singular")]
    SingularPrecision,
    #[error("matrix not positive definite during {0}")]
    NonPositiveDefinite(&'static str),
    #[error("observed-block covariance is singular")]
    SingularObservedBlock,
    #[error("rank-deficient regression design")]
    RankDeficient,
    #[error("pooling needs at least 2 imputations, got {0}")]
    TooFewImputations(usize),
    #[error("oracle problem size {0} exceeds cap {1}")]
    ProblemTooLarge(usize, usize),
}

impl Error {
    /// CLI exit code: 2 data, 3 config, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Csv(_)
            | Error::MissingColumn(_)
            | Error::DuplicatePatientVisit { .. }
            | Error::NonMonotoneFollowUp { .. }
            | Error::ArmNotBinary(_)
            | Error::InvalidField { .. }
            | Error::InvalidDataset(_)
            | Error::InsufficientData(_)
            | Error::InsufficientReferenceData(_) => 2,
            Error::NotNested { .. } | Error::InvalidConfig(_) => 3,
            Error::SingularPrecision
            | Error::NonPositiveDefinite(_)
            | Error::SingularObservedBlock
            | Error::RankDeficient
            | Error::TooFewImputations(_)
            | Error::ProblemTooLarge(..) => 4,
        }
    }
}
