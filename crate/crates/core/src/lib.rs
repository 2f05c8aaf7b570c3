//! Sparsity-based state estimation for low-observability distribution
//! feeders.
//!
//! Grid sensors rarely cover every bus and every time step. This crate
//! recovers the full spatio-temporal state matrix from whatever subset of
//! entries arrived, by exploiting three kinds of structure at once: the
//! matrix is near low-rank across the network, each temporal series is
//! compressible in the DCT basis, and voltages must sit close to the
//! linearized power-flow manifold of the feeder.
//!
//! Three estimators are provided:
//!
//! - [`mc_solver::classic_mc`] — per-time-step factorized matrix
//!   completion with power-flow penalties;
//! - [`mc_solver::joint_mc_cs`] — a single alternating minimization over
//!   the whole block matrix that also penalizes high-frequency DCT
//!   content of the temporal series;
//! - [`mc_solver::cs_mc_pipeline`] — per-sensor temporal compressed
//!   sensing followed by per-time completion.
//!
//! The [`harness`] module generates ground truth from a nonlinear
//! power-flow oracle and sweeps estimators over observability grids with
//! fully seeded determinism.

pub mod cs_solver;
pub mod error;
pub mod grid_model;
pub mod harness;
pub mod mc_solver;
pub mod measurements;
pub mod transforms;

pub use error::{Error, Result};
