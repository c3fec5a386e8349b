use thiserror::Error;

/// Errors raised by estimators, simulations and the backtester.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("covariance requires at least 2 observations, got {0}")]
    InsufficientObservations(usize),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("{0}")]
    Singular(&'static str),

    #[error("GMV denominator degenerate")]
    DegenerateDenominator,

    #[error("concentration too close to 1 (c = {0})")]
    GuardBand(f64),

    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("estimator coincides with target")]
    TargetCoincides,

    #[error("estimated Sharpe calibration undefined")]
    SharpeCalibrationUndefined,

    #[error("relative loss undefined (U_EU = {0} <= 0)")]
    RelativeLossUndefined(f64),

    #[error("shrinkage intensity denominator is not positive ({0})")]
    NonPositiveDenominator(f64),

    #[error("rank-one update singular: x'(V+)^2 x = {0}")]
    UpdateSingular(f64),

    #[error("degenerate factor fit: {0}")]
    DegenerateFactorFit(String),

    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Broad category used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl Error {
    /// Machine-readable error name.
    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InsufficientObservations(_) => "insufficient_observations",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::Singular(_) => "singular_matrix",
            Error::DegenerateDenominator => "gmv_denominator_degenerate",
            Error::GuardBand(_) => "guard_band",
            Error::RegimeMismatch(_) => "regime_mismatch",
            Error::TargetCoincides => "target_coincides",
            Error::SharpeCalibrationUndefined => "sharpe_calibration_undefined",
            Error::RelativeLossUndefined(_) => "relative_loss_undefined",
            Error::NonPositiveDenominator(_) => "nonpositive_denominator",
            Error::UpdateSingular(_) => "update_singular",
            Error::DegenerateFactorFit(_) => "degenerate_factor_fit",
            Error::ZeroVariance(_) => "zero_variance",
            Error::Parse { .. } => "parse_error",
            Error::Io(_) => "io_error",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_)
            | Error::DimensionMismatch { .. }
            | Error::InsufficientObservations(_)
            | Error::Parse { .. } => ErrorClass::Validation,
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
