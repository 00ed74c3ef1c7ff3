use thiserror::Error;

/// Errors surfaced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("quasi-complete separation: log likelihood within {threshold:e} of zero (perfect classification)")]
    Separation { threshold: f64 },

    #[error("information matrix numerically singular (reciprocal condition {rcond:.3e})")]
    Singular { rcond: f64 },

    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("propensity for record `{id}` hit the clamp bound: instrument positivity failure")]
    DegeneratePropensity { id: String },

    #[error("stratum (delta={delta}, d={treatment}) unusable: {reason}")]
    StratumTooSmall {
        delta: u8,
        treatment: u8,
        reason: String,
    },

    #[error("risk-set sum |S0| fell below nu={nu:.1e} at time {time} with signed weights present")]
    DegenerateRiskSet { time: f64, nu: f64 },

    #[error("no starting point produced a certified root (best score sup-norm {best_score_norm:.4})")]
    NoConvergence {
        best_score_norm: f64,
        best: Box<crate::phfit::PhFit>,
    },

    #[error("bootstrap: only {converged} of {requested} replicates converged in {attempted} attempts")]
    InsufficientConvergence {
        requested: usize,
        converged: usize,
        attempted: usize,
        partial: Box<crate::variance::VarianceEstimate>,
    },

    #[error("curvature matrix phi_n numerically singular in the variance plug-in")]
    SingularCurvature,

    #[error("truncation interval [{lo}, {hi}] must lie strictly inside (0, 1)")]
    BadTruncationInterval { lo: f64, hi: f64 },

    #[error("cause {cause} out of range 1..={max}")]
    CauseOutOfRange { cause: u32, max: u32 },

    #[error("dataset failed validation: {0}")]
    Invalid(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("csv: {0}")]
    Csv(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code convention: 2 convergence failure, 3 input error,
    /// 4 numeric degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoConvergence { .. } | Error::InsufficientConvergence { .. } => 2,
            Error::Csv(_) | Error::Config(_) | Error::Invalid(_) | Error::EmptyDataset
            | Error::DimensionMismatch { .. } | Error::CauseOutOfRange { .. }
            | Error::BadTruncationInterval { .. } | Error::Io(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
