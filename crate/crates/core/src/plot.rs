//! Long-format CSV extracts for plotting, read from a results directory.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::mc::normalized_errors;
use crate::observation::CaseKey;
use crate::report::{read_records, AreRecord, EstimateRecord, ReportError, ARE_TABLES, MC_ESTIMATES};
use crate::seir::PARAM_NAMES;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no results for {0}")]
    NotFound(String),
    #[error("unknown plot kind {0:?}; expected violin, scatter-pairs or are-vs-noise")]
    UnknownKind(String),
    #[error("{0} requires a case")]
    CaseRequired(PlotKind),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Estimates per noise level: `sigma, replicate, parameter, estimate, relative_error`.
    Violin,
    /// Relative errors at one noise level: `replicate, beta_err, gamma_err, alpha_err`.
    ScatterPairs,
    /// `scenario, data_type, frequency, sigma, parameter, are, threshold`.
    AreVsNoise,
}

impl PlotKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Violin => "violin",
            Self::ScatterPairs => "scatter-pairs",
            Self::AreVsNoise => "are-vs-noise",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = PlotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "violin" => Ok(Self::Violin),
            "scatter-pairs" | "scatter" => Ok(Self::ScatterPairs),
            "are-vs-noise" => Ok(Self::AreVsNoise),
            _ => Err(PlotError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotRequest {
    pub kind: PlotKind,
    /// Required for violin and scatter-pairs; restricts are-vs-noise.
    pub case: Option<CaseKey>,
    /// Parameter index for violin (all three when `None`).
    pub parameter: Option<usize>,
    /// Noise level for scatter-pairs (largest available when `None`).
    pub sigma: Option<f64>,
}

fn case_estimates(results: &Path, key: &CaseKey) -> Result<Vec<EstimateRecord>, PlotError> {
    let all: Vec<EstimateRecord> = read_records(&results.join(MC_ESTIMATES))?;
    let rows: Vec<EstimateRecord> = all.into_iter().filter(|r| r.key() == *key).collect();
    if rows.is_empty() {
        return Err(PlotError::NotFound(key.to_string()));
    }
    Ok(rows)
}

/// Writes the requested extract to `out` and returns the number of data rows.
pub fn emit_plot_data<W: Write>(results: &Path, req: &PlotRequest, out: W) -> Result<usize, PlotError> {
    let mut w = csv::Writer::from_writer(out);
    let mut n = 0;
    match req.kind {
        PlotKind::Violin => {
            let key = req.case.ok_or(PlotError::CaseRequired(req.kind))?;
            let rows = case_estimates(results, &key)?;
            w.write_record(["sigma", "replicate", "parameter", "estimate", "relative_error"])?;
            let params: Vec<usize> = match req.parameter {
                Some(k) => vec![k],
                None => (0..3).collect(),
            };
            for &k in &params {
                for r in &rows {
                    let est = r.params().to_array()[k];
                    let truth = r.truth().to_array()[k];
                    w.write_record([
                        r.sigma.to_string(),
                        r.replicate.to_string(),
                        PARAM_NAMES[k].to_string(),
                        est.to_string(),
                        ((est - truth) / truth).to_string(),
                    ])?;
                    n += 1;
                }
            }
        }
        PlotKind::ScatterPairs => {
            let key = req.case.ok_or(PlotError::CaseRequired(req.kind))?;
            let rows = case_estimates(results, &key)?;
            let sigma = match req.sigma {
                Some(s) => s,
                None => rows.iter().map(|r| r.sigma).fold(0.0, f64::max),
            };
            let at: Vec<&EstimateRecord> = rows.iter().filter(|r| (r.sigma - sigma).abs() < 1e-12).collect();
            if at.is_empty() {
                return Err(PlotError::NotFound(format!("{key} at sigma {sigma}")));
            }
            w.write_record(["replicate", "beta_err", "gamma_err", "alpha_err"])?;
            for r in at {
                let e = normalized_errors(&[r.params()], &r.truth())[0];
                w.write_record([r.replicate.to_string(), e[0].to_string(), e[1].to_string(), e[2].to_string()])?;
                n += 1;
            }
        }
        PlotKind::AreVsNoise => {
            let all: Vec<AreRecord> = read_records(&results.join(ARE_TABLES))?;
            let rows: Vec<&AreRecord> = all
                .iter()
                .filter(|r| {
                    req.case.is_none_or(|k| k.scenario == r.scenario && k.data_type == r.data_type && k.frequency == r.frequency)
                })
                .collect();
            if rows.is_empty() {
                return Err(PlotError::NotFound(req.case.map(|k| k.to_string()).unwrap_or_else(|| "any case".into())));
            }
            w.write_record(["scenario", "data_type", "frequency", "sigma", "parameter", "are", "threshold"])?;
            for r in rows {
                for (k, are) in [r.beta, r.gamma, r.alpha].into_iter().enumerate() {
                    w.write_record([
                        r.scenario.to_string(),
                        r.data_type.to_string(),
                        r.frequency.to_string(),
                        r.sigma.to_string(),
                        PARAM_NAMES[k].to_string(),
                        are.to_string(),
                        (100.0 * r.sigma).to_string(),
                    ])?;
                    n += 1;
                }
            }
        }
    }
    w.flush().map_err(|source| PlotError::Io {
        path: results.to_path_buf(),
        source,
    })?;
    Ok(n)
}
