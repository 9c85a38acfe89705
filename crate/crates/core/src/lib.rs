//! Practical identifiability of SEIR epidemic-model parameters.
//!
//! Two assessments are implemented side by side:
//!
//! - **Monte Carlo**: fit the model to many noisy synthetic datasets and
//!   summarise the spread of the estimates as an average relative
//!   estimation error (ARE) per parameter ([`mc`]).
//! - **Correlation matrix**: build the output sensitivity matrix, invert the
//!   weighted Fisher information and inspect pairwise parameter
//!   correlations ([`cm`]).
//!
//! [`report`] runs both over a grid of scenarios, data types and sampling
//! frequencies and writes CSV tables plus a markdown summary.

pub mod cm;
pub mod config;
pub mod mc;
pub mod observation;
pub mod optim;
pub mod plot;
pub mod report;
pub mod seir;
pub mod synth;

mod par;

pub use seir::{ParamVector, StateVector, Tolerances};

/// Toolkit version recorded in every output's provenance header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
