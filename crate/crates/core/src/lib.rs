//! Trajectory optimization with iterative LQR, using either analytic plant
//! derivatives or the input-Jacobians of a neural network fitted to rollout
//! data.
//!
//! The crate is organized bottom-up:
//!
//! * [`env`] simulated plants (cartpole, kinematic bicycle, linear) and
//!   parameter-level model inaccuracy.
//! * [`cost`] quadratic stage/terminal costs and their exact expansions.
//! * [`ilqr`] the model-agnostic backward/forward pass engine.
//! * [`neural`] the neural surrogate: architectures, training, input
//!   Jacobians and time-axis Gaussian smoothing of Jacobian schedules.
//! * [`dataset`] transition-sample storage and persistence.
//! * [`neural_loop`] the closed learning/optimization loop.
//! * [`experiment`] configs, baseline/neural runs, sweeps and reports.
//!
//! Data-parallel work (trial collection, per-timestep linearization, sweep
//! cells) goes through [`par::Execution`]; building without the default
//! `parallel` feature turns every parallel path into a sequential loop with
//! identical results.

pub mod cost;
pub mod dataset;
pub mod env;
pub mod experiment;
pub mod ilqr;
pub mod neural;
pub mod neural_loop;
pub mod par;

pub use nalgebra::{DMatrix, DVector};

/// Real state vector `x(τ)` of length `n`.
pub type StateVector = DVector<f64>;
/// Real action vector `u(τ)` of length `m`.
pub type ActionVector = DVector<f64>;
