//! Correlation-matrix identifiability.
//!
//! The output sensitivity matrix `F` (one row per observation, one column
//! per parameter) gives the weighted Fisher information `F^T W F`. Its
//! inverse `IM` approximates the estimator covariance, and the normalized
//! off-diagonals `IM_ij / sqrt(IM_ii IM_jj)` are the parameter
//! correlations. The parameter set counts as identifiable when every
//! correlation is below the threshold in magnitude.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::{Case, CaseError, CaseKey, DataType, ObservationSeries};
use crate::par::map_ordered;
use crate::seir::{integrate, ParamVector, Tolerances};

pub const DEFAULT_THRESHOLD: f64 = 0.9;
/// Largest condition number of the equilibrated information matrix that is
/// still inverted.
pub const MAX_CONDITION: f64 = 1e12;
/// Guard against zero model outputs in inverse-square weights.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmError {
    #[error("information matrix is numerically singular (condition number {condition:.3e})")]
    Noninvertible { condition: f64 },
    #[error("inverse information matrix has a nonpositive diagonal entry")]
    Degenerate,
    #[error("sensitivity matrix has {rows} rows but {weights} weights")]
    ShapeMismatch { rows: usize, weights: usize },
    #[error(transparent)]
    Case(#[from] CaseError),
}

/// How the diagonal weight matrix `W` is built from model outputs `g_i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `W_ii = 1 / g_i^2`, the weighting matched to multiplicative noise.
    #[default]
    InverseSquare,
    /// `W_ii = g_i`.
    Literal,
}

impl WeightMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::InverseSquare => "inverse-square",
            Self::Literal => "literal",
        }
    }

    pub fn weight(&self, g: f64) -> f64 {
        match self {
            Self::InverseSquare => {
                let d = g.abs().max(WEIGHT_FLOOR);
                1.0 / (d * d)
            }
            Self::Literal => g,
        }
    }
}

/// `rows[i][j]` is the derivative of observation `i` with respect to
/// parameter `j`, at `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    pub case: CaseKey,
    pub params: ParamVector,
    pub rows: Vec<[f64; 3]>,
    /// Model outputs at `params` on the same schedule.
    pub outputs: ObservationSeries,
}

/// Output sensitivities from the forward sensitivity equations.
///
/// Incidence rows are differences of consecutive cumulative-incidence
/// sensitivities, starting from zero at `t = 0`.
pub fn sensitivity_matrix(case: &Case, params: &ParamVector, tol: &Tolerances) -> Result<SensitivityMatrix, CmError> {
    let times = case.schedule.times();
    let traj = integrate(params, &case.scenario.init, times, true, tol).map_err(CaseError::from)?;
    let outputs = crate::observation::observe(&traj, case.data_type, &case.schedule).map_err(CaseError::from)?;
    let mut rows = Vec::with_capacity(times.len());
    let mut prev = [0.0; 3];
    for &t in times {
        let m = traj.sensitivity_at(t).expect("schedule times are on the trajectory").matrix;
        rows.push(match case.data_type {
            DataType::Prevalence => m[2],
            DataType::CumulativeIncidence => m[4],
            DataType::Incidence => std::array::from_fn(|j| m[4][j] - prev[j]),
        });
        prev = m[4];
    }
    Ok(SensitivityMatrix {
        case: case.key(),
        params: *params,
        rows,
        outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherInverse {
    pub im: [[f64; 3]; 3],
    /// Condition number of `F^T W F` as formed.
    pub condition: f64,
    /// Condition number after symmetric diagonal scaling to unit diagonal,
    /// which removes the effect of parameter units.
    pub scaled_condition: f64,
    pub mode: WeightMode,
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Inverse of `F^T diag(weights) F`.
///
/// Singularity is judged on the unit-diagonal rescaling of the matrix, and
/// the inverse is computed from that rescaling by Cholesky factorization.
pub fn fisher_inverse_weighted(rows: &[[f64; 3]], weights: &[f64], mode: WeightMode) -> Result<FisherInverse, CmError> {
    if rows.len() != weights.len() {
        return Err(CmError::ShapeMismatch {
            rows: rows.len(),
            weights: weights.len(),
        });
    }
    let mut a = Matrix3::zeros();
    for (r, w) in rows.iter().zip(weights) {
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] += w * r[i] * r[j];
            }
        }
    }
    let condition = condition_number(&a);
    let diag = a.diagonal();
    if !diag.iter().all(|d| *d > 0.0 && d.is_finite()) {
        return Err(CmError::Noninvertible {
            condition: f64::INFINITY,
        });
    }
    let d = diag.map(|v| 1.0 / v.sqrt());
    let scaled = Matrix3::from_fn(|i, j| a[(i, j)] * d[i] * d[j]);
    let scaled_condition = condition_number(&scaled);
    if !(scaled_condition <= MAX_CONDITION) {
        return Err(CmError::Noninvertible {
            condition: scaled_condition,
        });
    }
    let inv = scaled
        .cholesky()
        .ok_or(CmError::Noninvertible {
            condition: scaled_condition,
        })?
        .inverse();
    let mut im = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            im[i][j] = inv[(i, j)] * d[i] * d[j];
        }
    }
    Ok(FisherInverse {
        im,
        condition,
        scaled_condition,
        mode,
    })
}

/// Weights come from `outputs`, the model values at the sensitivity point.
pub fn fisher_inverse(f: &SensitivityMatrix, outputs: &ObservationSeries, mode: WeightMode) -> Result<FisherInverse, CmError> {
    let weights: Vec<f64> = outputs.values.iter().map(|g| mode.weight(*g)).collect();
    fisher_inverse_weighted(&f.rows, &weights, mode)
}

/// Correlations in the order beta:gamma, beta:alpha, gamma:alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations(pub [f64; 3]);

pub const CM_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
pub const CM_PAIR_NAMES: [&str; 3] = ["beta:gamma", "beta:alpha", "gamma:alpha"];

impl Correlations {
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

pub fn correlations(fi: &FisherInverse) -> Result<Correlations, CmError> {
    let im = &fi.im;
    if !(0..3).all(|k| im[k][k] > 0.0) {
        return Err(CmError::Degenerate);
    }
    Ok(Correlations(CM_PAIRS.map(|(i, j)| {
        let avg = 0.5 * (im[i][j] + im[j][i]);
        (avg / (im[i][i] * im[j][j]).sqrt()).clamp(-1.0, 1.0)
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmVerdict {
    pub identifiable: bool,
    pub correlations: Correlations,
    pub threshold: f64,
}

/// Identifiable iff every correlation is strictly below `threshold` in magnitude.
pub fn classify_cm(chi: &Correlations, threshold: f64) -> CmVerdict {
    CmVerdict {
        identifiable: chi.0.iter().all(|c| c.abs() < threshold),
        correlations: *chi,
        threshold,
    }
}

/// Full pipeline at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct CmResult {
    pub verdict: CmVerdict,
    pub fisher: FisherInverse,
}

pub fn assess(case: &Case, params: &ParamVector, tol: &Tolerances, mode: WeightMode, threshold: f64) -> Result<CmResult, CmError> {
    let f = sensitivity_matrix(case, params, tol)?;
    let fisher = fisher_inverse(&f, &f.outputs, mode)?;
    let chi = correlations(&fisher)?;
    Ok(CmResult {
        verdict: classify_cm(&chi, threshold),
        fisher,
    })
}

/// CM verdicts over a set of parameter estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudCm {
    pub evaluated: usize,
    pub identifiable: usize,
    /// Estimates whose information matrix could not be inverted.
    pub omitted: usize,
    /// Estimates at which the model could not be integrated.
    pub failed: usize,
}

impl CloudCm {
    pub fn retained(&self) -> usize {
        self.evaluated - self.omitted - self.failed
    }

    /// Percentage identifiable among retained estimates.
    pub fn percent(&self) -> Option<f64> {
        let n = self.retained();
        (n > 0).then(|| 100.0 * self.identifiable as f64 / n as f64)
    }
}

pub fn cm_over_cloud(
    case: &Case,
    estimates: &[ParamVector],
    tol: &Tolerances,
    mode: WeightMode,
    threshold: f64,
) -> CloudCm {
    let outcomes = map_ordered(estimates, |p| assess(case, p, tol, mode, threshold));
    let mut summary = CloudCm {
        evaluated: estimates.len(),
        identifiable: 0,
        omitted: 0,
        failed: 0,
    };
    for o in outcomes {
        match o {
            Ok(r) if r.verdict.identifiable => summary.identifiable += 1,
            Ok(_) => {}
            Err(CmError::Case(_)) => summary.failed += 1,
            Err(_) => summary.omitted += 1,
        }
    }
    summary
}
