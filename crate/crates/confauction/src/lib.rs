//! Data-driven auction mechanisms with a conformal acceptance gate.
//!
//! The crate trains multi-bidder multi-item auction mechanisms (allocation
//! and payment networks), quantifies their strategy-proofness violations via
//! regret, fits a regret prediction model, and calibrates an acceptance rule
//! so that accepted auctions exceed a requested regret level only with a
//! user-chosen probability.
//!
//! All numerical code is generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); concrete aliases for the main entry types live at the
//! crate root.

// Links the system OpenBLAS that backs ndarray's gemm dispatch.
use blas_src as _;

pub mod auction;
pub mod checkpoint;
pub mod conformal;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod mechanism;
pub mod nn;
pub mod regret;
pub mod scalar;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default tolerance for feasibility and individual-rationality checks.
pub const DEFAULT_TOL: f64 = 1e-6;

pub type ValuationProfile32 = auction::ValuationProfile<f32>;
pub type ValuationProfile64 = auction::ValuationProfile<f64>;
pub type Allocation32 = auction::Allocation<f32>;
pub type Allocation64 = auction::Allocation<f64>;
pub type AuctionOutcome32 = auction::AuctionOutcome<f32>;
pub type AuctionOutcome64 = auction::AuctionOutcome<f64>;
pub type DenseNet32 = nn::DenseNet<f32>;
pub type DenseNet64 = nn::DenseNet<f64>;
pub type MechanismParams32 = mechanism::MechanismParams<f32>;
pub type MechanismParams64 = mechanism::MechanismParams<f64>;
pub type EstimatorParams32 = estimator::EstimatorParams<f32>;
pub type EstimatorParams64 = estimator::EstimatorParams<f64>;
pub type CalibrationResult32 = conformal::CalibrationResult<f32>;
pub type CalibrationResult64 = conformal::CalibrationResult<f64>;
