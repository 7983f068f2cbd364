//! Numerical toolkit for a mean-field-game model of corruption in a
//! hierarchical organization.
//!
//! * [`grid`]: tensor grids, trapezoid quadrature, finite differences, CSV I/O
//! * [`model`]: coefficients, costs, mean-field averages, feedback controls
//! * [`solvers`]: backward HJB, forward Fokker-Planck and their Picard coupling
//! * [`agents`]: Monte Carlo simulation of the controlled SDE
//! * [`carleman`]: quadrature checks of the weighted parabolic estimates
//! * [`retro`]: reconstruction of the past from terminal snapshots
//! * [`cli`]: the `corrupt-mfg` command-line front end

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod carleman;
pub mod cli;
pub mod config;
pub mod error;
pub mod expr;
pub mod grid;
pub mod model;
pub mod retro;
pub mod solvers;
mod tridiag;

pub use error::{Error, Result};
pub use grid::{Grid, ScalarField, SpaceTimeField, TimeGrid};
pub use model::ModelParams;
pub use solvers::{solve_mfg, MFGSolution, SolverConfig};
