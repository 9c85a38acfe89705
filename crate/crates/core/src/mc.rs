//! Monte Carlo identifiability: refit the model to many noisy replicates
//! and measure how far the estimates stray from the truth.
//!
//! For every noise level each replicate is fitted from the true parameters.
//! The spread of the estimates is summarised per parameter as the average
//! relative estimation error
//!
//! ```text
//! ARE_k = 100 * (1/M) * sum_j |p_k - p_jk| / |p_k|
//! ```
//!
//! and a parameter counts as identifiable when `ARE_k <= 100 * sigma` at
//! every positive noise level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::{Case, CaseError, CaseKey};
use crate::optim::{NelderMeadOptions, Objective, OptimError, Termination, PENALTY};
use crate::par::map_ordered;
use crate::seir::{ParamVector, Tolerances, PARAM_NAMES};
use crate::synth::{generate_replicate, CumulativeNoise, NoiseSpec, SynthError, DEFAULT_SIGMAS};

#[derive(Debug, Error)]
pub enum McError {
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("at least {needed} estimates are required, got {got}")]
    TooFewEstimates { needed: usize, got: usize },
    #[error("true value of {0} is zero; relative errors are undefined")]
    ZeroTruth(&'static str),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    pub sigmas: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub optimizer: NelderMeadOptions,
    pub tolerances: Tolerances,
    pub cumulative_noise: CumulativeNoise,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            sigmas: DEFAULT_SIGMAS.to_vec(),
            replicates: 500,
            seed: 20240101,
            optimizer: NelderMeadOptions::default(),
            tolerances: Tolerances::default(),
            cumulative_noise: CumulativeNoise::default(),
        }
    }
}

/// One fitted replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub replicate: usize,
    pub params: ParamVector,
    /// Objective at the estimate.
    pub fval_est: f64,
    /// Objective of the same replicate at the true parameters.
    pub fval_true: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Estimates for one case at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateCloud {
    pub case: CaseKey,
    pub sigma: f64,
    pub truth: ParamVector,
    pub replicates: usize,
    pub estimates: Vec<Estimate>,
    /// Replicates whose fit never left the integration-failure penalty.
    pub excluded: Vec<usize>,
}

impl EstimateCloud {
    pub fn params(&self) -> Vec<ParamVector> {
        self.estimates.iter().map(|e| e.params).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreRow {
    pub sigma: f64,
    /// Percentages for beta, gamma, alpha; NaN when every replicate was excluded.
    pub are: [f64; 3],
    pub retained: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreTable {
    pub case: CaseKey,
    pub replicates: usize,
    pub rows: Vec<AreRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McVerdict {
    pub per_parameter: [bool; 3],
    pub identifiable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McRun {
    pub clouds: Vec<EstimateCloud>,
    pub are: AreTable,
}

fn fit_replicate(
    case: &Case,
    clean: &crate::observation::ObservationSeries,
    noise: NoiseSpec,
    j: usize,
    opts: &McOptions,
) -> Result<Estimate, McError> {
    let y = generate_replicate(case, clean, noise, opts.seed, j, opts.cumulative_noise)?;
    let obj = Objective::new(case, &y, opts.tolerances);
    let truth = case.truth();
    let r = obj.fit(&truth, &opts.optimizer)?;
    Ok(Estimate {
        replicate: j,
        params: ParamVector::from_array(r.best_params),
        fval_est: r.best_value,
        fval_true: obj.misfit(&clean.values),
        iterations: r.iterations,
        termination: r.termination,
    })
}

/// Fits every replicate at every noise level and tabulates the AREs.
///
/// At `sigma = 0` all replicates equal the clean series, so a single fit is
/// computed and shared.
pub fn run_mc(case: &Case, opts: &McOptions) -> Result<McRun, McError> {
    if opts.replicates == 0 {
        return Err(McError::NoReplicates);
    }
    let clean = case.clean_series(&opts.tolerances)?;
    let truth = case.truth();
    let indices: Vec<usize> = (0..opts.replicates).collect();
    let mut clouds = Vec::with_capacity(opts.sigmas.len());
    let mut rows = Vec::with_capacity(opts.sigmas.len());

    for &sigma in &opts.sigmas {
        let noise = NoiseSpec::new(sigma)?;
        let fits: Vec<Estimate> = if sigma == 0.0 {
            let once = fit_replicate(case, &clean, noise, 0, opts)?;
            indices
                .iter()
                .map(|&j| Estimate {
                    replicate: j,
                    ..once.clone()
                })
                .collect()
        } else {
            map_ordered(&indices, |&j| fit_replicate(case, &clean, noise, j, opts))
                .into_iter()
                .collect::<Result<_, _>>()?
        };
        let (estimates, failed): (Vec<_>, Vec<_>) = fits.into_iter().partition(|e| e.fval_est < PENALTY);
        let excluded: Vec<usize> = failed.iter().map(|e| e.replicate).collect();
        if !excluded.is_empty() {
            log::warn!("{}: {} replicates excluded at sigma {sigma}", case.key(), excluded.len());
        }
        let params: Vec<ParamVector> = estimates.iter().map(|e| e.params).collect();
        let are = if params.is_empty() {
            [f64::NAN; 3]
        } else {
            compute_are(&params, &truth)?
        };
        rows.push(AreRow {
            sigma,
            are,
            retained: estimates.len(),
            excluded: excluded.len(),
        });
        clouds.push(EstimateCloud {
            case: case.key(),
            sigma,
            truth,
            replicates: opts.replicates,
            estimates,
            excluded,
        });
    }

    Ok(McRun {
        clouds,
        are: AreTable {
            case: case.key(),
            replicates: opts.replicates,
            rows,
        },
    })
}

/// Average relative estimation error per parameter, in percent.
pub fn compute_are(estimates: &[ParamVector], truth: &ParamVector) -> Result<[f64; 3], McError> {
    if estimates.is_empty() {
        return Err(McError::TooFewEstimates { needed: 1, got: 0 });
    }
    let t = truth.to_array();
    let mut are = [0.0; 3];
    for k in 0..3 {
        if t[k] == 0.0 {
            return Err(McError::ZeroTruth(PARAM_NAMES[k]));
        }
        let total: f64 = estimates.iter().map(|p| (t[k] - p.to_array()[k]).abs()).sum();
        are[k] = 100.0 * total / (estimates.len() as f64 * t[k].abs());
    }
    Ok(are)
}

/// A parameter is identifiable when its ARE stays at or below the noise
/// percentage at every positive noise level.
pub fn classify_mc(table: &AreTable) -> McVerdict {
    let mut per_parameter = [true; 3];
    for row in table.rows.iter().filter(|r| r.sigma > 0.0) {
        for k in 0..3 {
            if !(row.are[k] <= 100.0 * row.sigma) {
                per_parameter[k] = false;
            }
        }
    }
    McVerdict {
        per_parameter,
        identifiable: per_parameter.iter().all(|&b| b),
    }
}

/// Parameter pairs as (abscissa, ordinate) indices.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (2, 1)];
pub const SLOPE_BAND: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSlope {
    pub x: usize,
    pub y: usize,
    /// `None` when the abscissa errors have zero variance.
    pub slope: Option<f64>,
    pub correlated: bool,
}

impl PairSlope {
    /// `"beta:gamma"` style label, abscissa first.
    pub fn name(&self) -> String {
        format!("{}:{}", PARAM_NAMES[self.x], PARAM_NAMES[self.y])
    }
}

/// Relative errors `(p_j - p) / p` of each estimate.
pub fn normalized_errors(estimates: &[ParamVector], truth: &ParamVector) -> Vec<[f64; 3]> {
    let t = truth.to_array();
    estimates
        .iter()
        .map(|p| {
            let a = p.to_array();
            std::array::from_fn(|k| (a[k] - t[k]) / t[k])
        })
        .collect()
}

/// Least-squares slopes of the second parameter's relative error on the
/// first's, for the pairs in [`PAIRS`]. A pair is correlated when the slope
/// magnitude falls inside [`SLOPE_BAND`].
pub fn estimate_pair_slopes(estimates: &[ParamVector], truth: &ParamVector) -> Result<[PairSlope; 3], McError> {
    if estimates.len() < 2 {
        return Err(McError::TooFewEstimates {
            needed: 2,
            got: estimates.len(),
        });
    }
    if let Some(k) = truth.to_array().iter().position(|v| *v == 0.0) {
        return Err(McError::ZeroTruth(PARAM_NAMES[k]));
    }
    let err = normalized_errors(estimates, truth);
    let n = err.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|k| err.iter().map(|e| e[k]).sum::<f64>() / n);
    Ok(PAIRS.map(|(x, y)| {
        let sxx: f64 = err.iter().map(|e| (e[x] - mean[x]).powi(2)).sum();
        let sxy: f64 = err.iter().map(|e| (e[x] - mean[x]) * (e[y] - mean[y])).sum();
        let slope = (sxx > 0.0).then(|| sxy / sxx).filter(|s| s.is_finite());
        let correlated = slope.is_some_and(|s| (SLOPE_BAND.0..=SLOPE_BAND.1).contains(&s.abs()));
        PairSlope { x, y, slope, correlated }
    }))
}

/// `(fval_true - fval_est) / fval_true`; positive when the estimate fits
/// the noisy data better than the truth. Undefined when `fval_true` is 0.
pub fn normalized_fval(fval_true: f64, fval_est: f64) -> Option<f64> {
    (fval_true > 0.0 && fval_true.is_finite()).then(|| (fval_true - fval_est) / fval_true)
}
