//! Feedback-based optimization of dynamical systems.
//!
//! The crate is organized bottom-up:
//!
//! - [`convex`]: sets, tangent cones, metrics and the dense QP solver.
//! - [`flows`]: gradient, projected and saddle-point vector fields.
//! - [`sim`]: fixed-step integration with projection and divergence detection.
//! - [`plants`]: dynamical and steady-state plant models.
//! - [`controllers`]: feedback optimization controllers.
//! - [`stability`]: timescale-separation and LMI certificates.
//! - [`powerflow`]: AC power flow, sensitivities and OPF assembly.
//! - [`scenarios`]: end-to-end scenarios, run configuration and summaries.

pub mod controllers;
pub mod convex;
pub mod error;
pub mod flows;
pub mod plants;
pub mod powerflow;
pub mod scenarios;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};

/// Dense column vector used throughout.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout.
pub type Matrix = nalgebra::DMatrix<f64>;
