//! The SEIR dynamical system, its forward sensitivities, and the adaptive
//! integrator that solves both.

mod model;
pub mod ode;

pub use model::{
    daily_grid, integrate, reproduction_number, sensitivity_rhs, seir_rhs, ModelError,
    ParamVector, SensitivityBlock, SensitivityMatrix5x3, StateVector, Trajectory, PARAM_NAMES,
};
pub use ode::{IntegrationError, Tolerances};
