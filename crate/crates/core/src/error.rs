use alloc::string::String;
use alloc::vec::Vec;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or inconsistent input.
    Validation,
    /// Input is well formed but carries no usable information (empty arms,
    /// no test-in signal, too few clusters).
    Degenerate,
    /// A numerical routine could not produce a trustworthy answer.
    Numerical,
}

/// A single offending input row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    /// 1-based row number in the source (header excluded).
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("{} invalid row(s); first: row {}: {}", .0.len(), .0[0].row, .0[0].message)]
    InvalidRows(Vec<RowError>),
    #[error("treatment varies within cluster `{0}`")]
    TreatmentVariesWithinCluster(String),
    #[error("duplicate observation for unit `{unit}` in follow-up year {year}")]
    DuplicateObservation { unit: String, year: u32 },
    #[error("unit `{0}` appears in more than one cluster")]
    UnitSwitchesCluster(String),
    #[error("tested-in flag decreases over time for unit `{0}`")]
    NonMonotoneTestIn(String),
    #[error("no test-in signal: tested-in flags are absent and no threshold rule was given")]
    MissingTestIn,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no test-in signal: every control test-in proportion is zero")]
    NoTestInSignal,
    #[error("clipped solution degenerate; use fallback solver")]
    DegenerateClipping,
    #[error("group {0} has no {1} observations")]
    EmptyArm(usize, &'static str),
    #[error("no usable groups")]
    NoGroups,
    #[error("need at least {needed} clusters, found {found}")]
    TooFewClusters { needed: usize, found: usize },
    #[error("degrees of freedom must be positive, got {0}")]
    NonPositiveDf(f64),
    #[error("exit rule selects no {0} observations")]
    EmptyExitArm(&'static str),
    #[error("{method}: {excluded} of {reps} replicates failed to estimate")]
    TooManyExclusions { method: String, excluded: usize, reps: usize },

    #[error("matrix is singular or not positive definite")]
    Singular,
    #[error("rank-deficient control design in group {0}")]
    RankDeficient(usize),
    #[error("regression design is rank deficient")]
    RankDeficientDesign,
    #[error("aggregate variance is not positive ({0})")]
    NonPositiveVariance(f64),
    #[error("test slope is zero")]
    ZeroSlope,
    #[error("calibration did not converge: {0}")]
    Calibration(String),
    #[error("numerical failure: {0}")]
    Numerical(&'static str),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            MissingColumn(_)
            | InvalidRows(_)
            | TreatmentVariesWithinCluster(_)
            | DuplicateObservation { .. }
            | UnitSwitchesCluster(_)
            | NonMonotoneTestIn(_)
            | Dimension(_)
            | InvalidArgument(_) => ErrorClass::Validation,
            MissingTestIn
            | NoTestInSignal
            | DegenerateClipping
            | EmptyArm(..)
            | NoGroups
            | TooFewClusters { .. }
            | NonPositiveDf(_)
            | EmptyExitArm(_)
            | TooManyExclusions { .. } => ErrorClass::Degenerate,
            Singular
            | RankDeficient(_)
            | RankDeficientDesign
            | NonPositiveVariance(_)
            | ZeroSlope
            | Calibration(_)
            | Numerical(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
