//! Integrated prediction and multi-period mean-variance portfolio optimization.
//!
//! The inner allocation program is solved by stagewise entropic mirror descent
//! and differentiated implicitly through its fixed point, so a return
//! forecaster can be trained on the quality of the decisions it induces.

pub mod backtest;
pub mod bench;
pub mod domain;
pub mod error;
pub mod forecast;
pub mod gradcheck;
pub mod io;
pub mod mdfp;
pub mod objective;
pub mod oracles;
pub mod solver;

pub use domain::{
    clamp_floor, simplex_residual, AllocationPath, CovariancePath, ForecastPath, ProblemParams,
    RealizedPanel, StageMatrix,
};
pub use error::{Error, Result};
