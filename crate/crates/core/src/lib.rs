//! Two-stage penalized least squares for large systems of linear
//! structural equations `Y = Y·Γ + X·Ψ + ε`.
//!
//! Stage one fits every reduced-form equation by ridge regression with a
//! GCV-selected penalty ([`ridge`]). Stage two fits every structural
//! equation by an adaptive lasso on instrument-annihilated data
//! ([`alasso`]). [`pipeline`] assembles the system and runs bootstrap edge
//! confidence; [`simgen`] generates synthetic networks and scores fits.

pub mod alasso;
pub mod data;
mod error;
pub mod pipeline;
pub mod ridge;
pub mod seed;
pub mod simgen;

#[cfg(test)]
mod testutil;

pub use alasso::{AdaptiveLassoConfig, EquationFit, EquationProblem, LambdaRule, LassoOptions};
pub use data::{center_columns, validate, DataSet, ExoAssignment, ValidationReport};
pub use error::{Error, Result};
pub use pipeline::{
    bootstrap_edges, fit_system, BootstrapConfig, EdgeFrequencyTable, FitConfig, SystemEstimate,
};
pub use ridge::{GcvSearchConfig, StageOneStrategy};
