//! Dormand-Prince 5(4) explicit Runge-Kutta integrator with dense output.
//!
//! The step sequence depends only on the right-hand side, the initial value
//! and the tolerances, never on the requested output times: outputs are
//! produced by the continuous extension of whichever accepted step contains
//! them, and the integrator simply stops once the last output is passed.
//! Integrating to day 100 therefore reproduces, bit for bit, the first 100
//! days of an integration to day 365.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Error-control tolerances for the adaptive integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
        }
    }
}

impl Tolerances {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol }
    }

    /// Both tolerances scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rtol: self.rtol * factor,
            atol: self.atol * factor,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.rtol.is_finite() && self.atol.is_finite() && self.rtol > 0.0 && self.atol > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationError {
    #[error("step size underflow at t = {time}")]
    StepSizeUnderflow { time: f64 },
    #[error("step budget of {max_steps} exhausted at t = {time}")]
    TooManySteps { time: f64, max_steps: usize },
    #[error("invalid output grid: {0}")]
    InvalidGrid(String),
    #[error("tolerances must be finite and positive")]
    InvalidTolerances,
    #[error("non-finite initial state or parameters")]
    NonFiniteInput,
}

impl IntegrationError {
    /// Time at which integration failed, when it failed mid-run.
    pub fn time(&self) -> Option<f64> {
        match self {
            Self::StepSizeUnderflow { time } | Self::TooManySteps { time, .. } => Some(*time),
            _ => None,
        }
    }
}

/// Hard cap on attempted steps for a single integration.
pub const MAX_STEPS: usize = 200_000;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

#[inline]
fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (coef, k) in terms {
        let c = h * coef;
        for i in 0..N {
            out[i] += c * k[i];
        }
    }
    out
}

#[inline]
fn scaled_norm<const N: usize>(v: &[f64; N], y0: &[f64; N], y1: &[f64; N], tol: &Tolerances) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let sc = tol.atol + tol.rtol * y0[i].abs().max(y1[i].abs());
        let r = v[i] / sc;
        acc += r * r;
    }
    (acc / N as f64).sqrt()
}

fn initial_step<const N: usize, F>(rhs: &F, t0: f64, y0: &[f64; N], f0: &[f64; N], tol: &Tolerances) -> f64
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let d0 = scaled_norm(y0, y0, y0, tol);
    let d1 = scaled_norm(f0, y0, y0, tol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = combine(y0, h0, &[(1.0, f0)]);
    let f1 = rhs(t0 + h0, &y1);
    let mut diff = [0.0; N];
    for i in 0..N {
        diff[i] = f1[i] - f0[i];
    }
    let d2 = scaled_norm(&diff, y0, y0, tol) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

/// Integrates `y' = rhs(t, y)` from `(t0, y0)` and returns the solution at
/// each of `outputs`, which must be strictly increasing and no earlier than
/// `t0`.
pub fn dopri5<const N: usize, F>(
    rhs: F,
    t0: f64,
    y0: [f64; N],
    outputs: &[f64],
    tol: &Tolerances,
) -> Result<Vec<[f64; N]>, IntegrationError>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    if !tol.is_valid() {
        return Err(IntegrationError::InvalidTolerances);
    }
    validate_outputs(t0, outputs)?;

    let mut result = Vec::with_capacity(outputs.len());
    let mut next = 0;
    while next < outputs.len() && outputs[next] == t0 {
        result.push(y0);
        next += 1;
    }
    if next == outputs.len() {
        return Ok(result);
    }

    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(t, &y);
    let mut h = initial_step(&rhs, t, &y, &k1, tol);
    let mut last_rejected = false;
    let mut steps = 0usize;

    while next < outputs.len() {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(IntegrationError::TooManySteps {
                time: t,
                max_steps: MAX_STEPS,
            });
        }
        if !(h > 1e-14 * t.abs().max(1.0)) {
            return Err(IntegrationError::StepSizeUnderflow { time: t });
        }

        let k2 = rhs(t + C2 * h, &combine(&y, h, &[(A21, &k1)]));
        let k3 = rhs(t + C3 * h, &combine(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = rhs(
            t + C4 * h,
            &combine(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = rhs(
            t + C5 * h,
            &combine(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = rhs(
            t + h,
            &combine(
                &y,
                h,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = combine(
            &y,
            h,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        );
        let k7 = rhs(t + h, &y_new);

        let mut err_vec = [0.0; N];
        for i in 0..N {
            err_vec[i] =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let err = scaled_norm(&err_vec, &y, &y_new, tol);

        if !err.is_finite() {
            h *= FAC_MIN;
            last_rejected = true;
            continue;
        }

        if err <= 1.0 {
            let t_new = t + h;
            // Continuous extension coefficients for this step.
            let mut ydiff = [0.0; N];
            let mut bspl = [0.0; N];
            let mut r4 = [0.0; N];
            let mut r5 = [0.0; N];
            for i in 0..N {
                ydiff[i] = y_new[i] - y[i];
                bspl[i] = h * k1[i] - ydiff[i];
                r4[i] = ydiff[i] - h * k7[i] - bspl[i];
                r5[i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            while next < outputs.len() && outputs[next] <= t_new {
                let t_out = outputs[next];
                if t_out == t_new {
                    result.push(y_new);
                } else {
                    let theta = (t_out - t) / h;
                    let theta1 = 1.0 - theta;
                    let mut yo = [0.0; N];
                    for i in 0..N {
                        yo[i] = y[i]
                            + theta * (ydiff[i] + theta1 * (bspl[i] + theta * (r4[i] + theta1 * r5[i])));
                    }
                    result.push(yo);
                }
                next += 1;
            }

            t = t_new;
            y = y_new;
            k1 = k7;

            let mut fac = SAFETY * err.powf(-0.2);
            if err == 0.0 {
                fac = FAC_MAX;
            }
            let fac_max = if last_rejected { 1.0 } else { FAC_MAX };
            h *= fac.clamp(FAC_MIN, fac_max);
            last_rejected = false;
        } else {
            let fac = (SAFETY * err.powf(-0.2)).max(FAC_MIN);
            h *= fac;
            last_rejected = true;
        }
    }

    Ok(result)
}

fn validate_outputs(t0: f64, outputs: &[f64]) -> Result<(), IntegrationError> {
    if let Some(first) = outputs.first() {
        if !first.is_finite() || *first < t0 {
            return Err(IntegrationError::InvalidGrid(format!(
                "first output time {first} precedes the initial time {t0}"
            )));
        }
    }
    for w in outputs.windows(2) {
        if !(w[1] > w[0]) || !w[1].is_finite() {
            return Err(IntegrationError::InvalidGrid(format!(
                "output times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
        let sol = dopri5(|_, y: &[f64; 1]| [-0.7 * y[0]], 0.0, [2.0], &times, &Tolerances::default()).unwrap();
        for (t, y) in times.iter().zip(&sol) {
            let exact = 2.0 * (-0.7 * t).exp();
            assert!((y[0] - exact).abs() <= 1e-8 * exact + 1e-10, "t={t}");
        }
    }

    #[test]
    fn harmonic_oscillator_dense_output() {
        // Outputs at irregular points exercise the continuous extension.
        let times = [0.0, 0.013, 0.7, 1.91, 3.3, 6.0];
        let sol = dopri5(
            |_, y: &[f64; 2]| [y[1], -y[0]],
            0.0,
            [1.0, 0.0],
            &times,
            &Tolerances::new(1e-10, 1e-12),
        )
        .unwrap();
        for (t, y) in times.iter().zip(&sol) {
            assert!((y[0] - t.cos()).abs() < 1e-8);
            assert!((y[1] + t.sin()).abs() < 1e-8);
        }
    }

    #[test]
    fn output_grid_does_not_change_step_sequence() {
        let rhs = |_: f64, y: &[f64; 2]| [y[1], -y[0] - 0.1 * y[1]];
        let fine: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let coarse: Vec<f64> = (1..=5).map(|i| i as f64 * 0.7).collect();
        let tol = Tolerances::default();
        let a = dopri5(rhs, 0.0, [1.0, 0.0], &fine, &tol).unwrap();
        let b = dopri5(rhs, 0.0, [1.0, 0.0], &fine[..31], &tol).unwrap();
        assert_eq!(&a[..31], &b[..]);
        // Different grids share steps, so grid points common to both agree exactly.
        let c = dopri5(rhs, 0.0, [1.0, 0.0], &coarse, &tol).unwrap();
        let mut longer = coarse.clone();
        longer.push(9.0);
        let d = dopri5(rhs, 0.0, [1.0, 0.0], &longer, &tol).unwrap();
        assert_eq!(&c[..], &d[..5]);
    }

    #[test]
    fn rejects_bad_grids_and_tolerances() {
        let rhs = |_: f64, y: &[f64; 1]| [y[0]];
        assert!(matches!(
            dopri5(rhs, 0.0, [1.0], &[1.0, 1.0], &Tolerances::default()),
            Err(IntegrationError::InvalidGrid(_))
        ));
        assert!(matches!(
            dopri5(rhs, 1.0, [1.0], &[0.5], &Tolerances::default()),
            Err(IntegrationError::InvalidGrid(_))
        ));
        assert_eq!(
            dopri5(rhs, 0.0, [1.0], &[1.0], &Tolerances::new(0.0, 1e-10)),
            Err(IntegrationError::InvalidTolerances)
        );
    }

    #[test]
    fn blow_up_reports_failure_time() {
        // y' = y^2, y(0) = 1 blows up at t = 1.
        let err = dopri5(|_, y: &[f64; 1]| [y[0] * y[0]], 0.0, [1.0], &[2.0], &Tolerances::default())
            .unwrap_err();
        let t = err.time().expect("failure carries a time");
        assert!(t > 0.99 && t < 1.0 + 1e-6, "failed at {t}");
    }

    #[test]
    fn output_at_initial_time_returns_initial_value() {
        let sol = dopri5(|_, y: &[f64; 1]| [y[0]], 0.0, [3.0], &[0.0, 1.0], &Tolerances::default()).unwrap();
        assert_eq!(sol[0], [3.0]);
        assert!((sol[1][0] - 3.0 * 1f64.exp()).abs() < 1e-6);
    }
}
