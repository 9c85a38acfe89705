use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ode::{dopri5, IntegrationError, Tolerances};

/// Compartment sizes at one instant: susceptible, exposed, infectious,
/// recovered, and the running count of infections `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub r: f64,
    pub c: f64,
}

impl StateVector {
    pub const fn new(s: f64, e: f64, i: f64, r: f64, c: f64) -> Self {
        Self { s, e, i, r, c }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.s, self.e, self.i, self.r, self.c]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    /// S + E + I + R; the cumulative class is bookkeeping, not population.
    pub fn population(&self) -> f64 {
        self.s + self.e + self.i + self.r
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub const PARAM_NAMES: [&str; 3] = ["beta", "gamma", "alpha"];

/// Transmission (`beta`), incubation (`gamma`) and recovery (`alpha`) rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl ParamVector {
    pub const fn new(beta: f64, gamma: f64, alpha: f64) -> Self {
        Self { beta, gamma, alpha }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.beta, self.gamma, self.alpha]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// `matrix[k][j]` is the derivative of compartment `k` (S, E, I, R, C) with
/// respect to parameter `j` (beta, gamma, alpha).
pub type SensitivityMatrix5x3 = [[f64; 3]; 5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityBlock {
    pub time: f64,
    pub matrix: SensitivityMatrix5x3,
}

impl SensitivityBlock {
    pub fn zero(time: f64) -> Self {
        Self {
            time,
            matrix: [[0.0; 3]; 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("recovery rate must be positive, got {0}")]
    NonPositiveRecovery(f64),
}

/// Right-hand side of the SEIR system with the cumulative-infection class.
#[inline]
pub fn seir_rhs(state: &StateVector, p: &ParamVector) -> StateVector {
    let flow = p.beta * state.s * state.i;
    let onset = p.gamma * state.e;
    let recovery = p.alpha * state.i;
    StateVector {
        s: -flow,
        e: flow - onset,
        i: onset - recovery,
        r: recovery,
        c: flow,
    }
}

/// Forward sensitivity equations: `d/dt (dx/dp) = (df/dx)(dx/dp) + df/dp`.
#[inline]
pub fn sensitivity_rhs(
    state: &StateVector,
    sens: &SensitivityMatrix5x3,
    p: &ParamVector,
) -> SensitivityMatrix5x3 {
    let StateVector { s, e, i, .. } = *state;
    let si = s * i;
    let mut out = [[0.0; 3]; 5];
    for j in 0..3 {
        let ds = sens[0][j];
        let de = sens[1][j];
        let di = sens[2][j];
        // d(beta*S*I)/dp_j along the trajectory, without the explicit term.
        let dflow = p.beta * (i * ds + s * di);
        out[0][j] = -dflow;
        out[1][j] = dflow - p.gamma * de;
        out[2][j] = p.gamma * de - p.alpha * di;
        out[3][j] = p.alpha * di;
        out[4][j] = dflow;
    }
    // Explicit df/dp.
    out[0][0] -= si;
    out[1][0] += si;
    out[4][0] += si;
    out[1][1] -= e;
    out[2][1] += e;
    out[2][2] -= i;
    out[3][2] += i;
    out
}

/// Basic reproduction number `beta * N / alpha`.
pub fn reproduction_number(p: &ParamVector, population: f64) -> Result<f64, ModelError> {
    if !(p.alpha > 0.0) {
        return Err(ModelError::NonPositiveRecovery(p.alpha));
    }
    Ok(p.beta * population / p.alpha)
}

/// A solution sampled on an output grid that starts at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub sensitivities: Option<Vec<SensitivityBlock>>,
    pub tolerances: Tolerances,
}

impl Trajectory {
    /// Index of the grid point at `t`, if `t` is on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let idx = self.times.partition_point(|&x| x < t - 1e-9);
        (idx < self.times.len() && (self.times[idx] - t).abs() <= 1e-9).then_some(idx)
    }

    pub fn state_at(&self, t: f64) -> Option<&StateVector> {
        self.index_of(t).map(|k| &self.states[k])
    }

    pub fn sensitivity_at(&self, t: f64) -> Option<&SensitivityBlock> {
        let k = self.index_of(t)?;
        self.sensitivities.as_ref().map(|s| &s[k])
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

/// Integer day grid `0, 1, ..., span`.
pub fn daily_grid(span: u32) -> Vec<f64> {
    (0..=span).map(f64::from).collect()
}

/// Solves the SEIR system (and optionally its sensitivities) at
/// `output_times`. The returned trajectory always begins at `t = 0`; a zero
/// is prepended when `output_times` does not already start there.
pub fn integrate(
    params: &ParamVector,
    init: &StateVector,
    output_times: &[f64],
    with_sensitivities: bool,
    tol: &Tolerances,
) -> Result<Trajectory, IntegrationError> {
    if !params.is_finite() || !init.is_finite() {
        return Err(IntegrationError::NonFiniteInput);
    }
    if output_times.first().is_some_and(|&t| t < 0.0) {
        return Err(IntegrationError::InvalidGrid(
            "output times must not be negative".into(),
        ));
    }
    let mut times = Vec::with_capacity(output_times.len() + 1);
    if output_times.first() != Some(&0.0) {
        times.push(0.0);
    }
    times.extend_from_slice(output_times);

    let p = *params;
    if !with_sensitivities {
        let sol = dopri5(
            move |_, y: &[f64; 5]| seir_rhs(&StateVector::from_array(*y), &p).to_array(),
            0.0,
            init.to_array(),
            &times,
            tol,
        )?;
        return Ok(Trajectory {
            states: sol.into_iter().map(StateVector::from_array).collect(),
            times,
            sensitivities: None,
            tolerances: *tol,
        });
    }

    let mut y0 = [0.0; 20];
    y0[..5].copy_from_slice(&init.to_array());
    let sol = dopri5(
        move |_, y: &[f64; 20]| {
            let (state, sens) = unpack(y);
            let dx = seir_rhs(&state, &p).to_array();
            let ds = sensitivity_rhs(&state, &sens, &p);
            let mut out = [0.0; 20];
            out[..5].copy_from_slice(&dx);
            for k in 0..5 {
                out[5 + 3 * k..8 + 3 * k].copy_from_slice(&ds[k]);
            }
            out
        },
        0.0,
        y0,
        &times,
        tol,
    )?;
    let mut states = Vec::with_capacity(sol.len());
    let mut blocks = Vec::with_capacity(sol.len());
    for (y, &t) in sol.iter().zip(&times) {
        let (state, sens) = unpack(y);
        states.push(state);
        blocks.push(SensitivityBlock { time: t, matrix: sens });
    }
    Ok(Trajectory {
        times,
        states,
        sensitivities: Some(blocks),
        tolerances: *tol,
    })
}

#[inline]
fn unpack(y: &[f64; 20]) -> (StateVector, SensitivityMatrix5x3) {
    let state = StateVector::new(y[0], y[1], y[2], y[3], y[4]);
    let mut sens = [[0.0; 3]; 5];
    for (k, row) in sens.iter_mut().enumerate() {
        row.copy_from_slice(&y[5 + 3 * k..8 + 3 * k]);
    }
    (state, sens)
}
