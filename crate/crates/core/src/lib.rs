//! Optimal shrinkage estimation of high-dimensional mean-variance portfolio
//! weights, for both `p < n` and `p > n`.
//!
//! The estimation code is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`. [`simulate`] and [`backtest`]
//! are `f64` only.

pub mod backtest;
pub mod error;
pub mod frontier;
pub mod inverse;
pub mod loss;
pub mod moments;
pub mod scalar;
pub mod shrinkage;
pub mod simulate;
pub mod types;

pub use error::{Error, ErrorClass, Result};
pub use frontier::{FrontierParams, FrontierSource, TargetStats};
pub use loss::LossReport;
pub use scalar::Real;
pub use shrinkage::{Beta, Calibration, CalibrationMode, Regime};
pub use types::{MatrixKind, PortfolioWeights, Provenance, ReturnsMatrix, SymmetricMatrix};

pub type Returns = ReturnsMatrix<f64>;
pub type Symmetric = SymmetricMatrix<f64>;
pub type Weights = PortfolioWeights<f64>;

pub type Returns32 = ReturnsMatrix<f32>;
pub type Symmetric32 = SymmetricMatrix<f32>;
pub type Weights32 = PortfolioWeights<f32>;
pub type Frontier = FrontierParams<f64>;
pub type Mode = CalibrationMode<f64>;
