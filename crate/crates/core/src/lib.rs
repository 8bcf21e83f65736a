//! Quadratic-exponential BSDEs with infinite-activity jumps.
//!
//! The crate follows the constructive route to existence: truncate the jump
//! measure to `|e| >= 1/kappa`, replace the driver by Lipschitz envelopes
//! `f^{n,m,kappa}`, solve each Lipschitz equation by regression Monte Carlo on
//! a shared path ensemble, and check the structural claims (comparison,
//! structure corridor, entropic bounds) on the simulated solutions.

// `!(x > 0.0)` guards deliberately reject NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsdej;
pub mod driver;
pub mod error;
pub mod grid;
pub mod integrate;
pub mod levy;
pub mod regression;
pub mod risk;
pub mod scheme;
pub mod semimartingale;
pub mod stats;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use levy::{
    build_quadrature, build_quadrature_banded, j_functional, sample_jump_paths, small_jump_residual, Density,
    JumpField, JumpTable, LevyModel, MarkQuadrature, Zeta,
};
