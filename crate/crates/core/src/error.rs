use thiserror::Error;

/// Errors raised by the numerical pipeline.
///
/// `is_numerical` separates failures of the numerics (exit code 2 at the CLI)
/// from invalid input (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("config invalid at `{path}`: {message}")]
    ConfigInvalid { path: String, message: String },

    #[error("mean matrix has a repeated eigenvalue (min gap {gap:.3e} <= tol {tol:.3e})")]
    DegenerateMeanMatrix { gap: f64, tol: f64 },

    #[error("truncation radius K = {k} is smaller than the coefficient bandwidth {bandwidth}")]
    TruncationTooSmall { k: usize, bandwidth: usize },

    #[error("eigensolver failed: {0}")]
    EigensolverFailure(String),

    #[error("integrator stalled at x = {x:.6} (step {step:.3e}) for lambda = {lambda}")]
    IntegratorStall { x: f64, step: f64, lambda: String },

    #[error("fitting range too small: k in [{k_lo}, {k_hi}] needs k_hi - k_lo >= 4")]
    InsufficientRange { k_lo: usize, k_hi: usize },

    #[error("pair is flagged defective (|alpha| = {alpha:.3e})")]
    FlaggedPair { alpha: f64 },

    #[error("branch integral does not converge under panel refinement (branch {label})")]
    NonIntegrableBranch { label: usize },

    #[error("huddled integral failed the Cauchy test: tail {tail:.3e} > {tol:.3e}")]
    HuddleDiverged { tail: f64, tol: f64, sequence: Vec<f64> },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigInvalid { path: path.into(), message: message.into() }
    }

    /// Short machine-readable tag used in the CLI error document.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidOperator(_) => "InvalidOperator",
            Error::ConfigInvalid { .. } => "ConfigInvalid",
            Error::DegenerateMeanMatrix { .. } => "DegenerateMeanMatrix",
            Error::TruncationTooSmall { .. } => "TruncationTooSmall",
            Error::EigensolverFailure(_) => "EigensolverFailure",
            Error::IntegratorStall { .. } => "IntegratorStall",
            Error::InsufficientRange { .. } => "InsufficientRange",
            Error::FlaggedPair { .. } => "FlaggedPair",
            Error::NonIntegrableBranch { .. } => "NonIntegrableBranch",
            Error::HuddleDiverged { .. } => "HuddleDiverged",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EigensolverFailure(_)
                | Error::IntegratorStall { .. }
                | Error::NonIntegrableBranch { .. }
                | Error::HuddleDiverged { .. }
                | Error::FlaggedPair { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
