//! Runs the configured case grid and writes the result tables.
//!
//! Output directory layout:
//!
//! | file                 | one row per                               |
//! |----------------------|-------------------------------------------|
//! | `are_tables.csv`     | case and noise level                      |
//! | `mc_verdicts.csv`    | case                                      |
//! | `mc_estimates.csv`   | case, noise level and retained replicate  |
//! | `slopes.csv`         | case, noise level and parameter pair      |
//! | `cm_correlations.csv`| case                                      |
//! | `cm_verdicts.csv`    | case                                      |
//! | `cm_over_mc.csv`     | case and noise level                      |
//! | `report.md`          | summary grids                             |
//!
//! Every CSV starts with `#` comment lines recording the settings that
//! produced it. Files are written to a temporary name and renamed, so an
//! interrupted run never leaves a partial table behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::cm::{self, CloudCm, CmError, CmResult, WeightMode, CM_PAIR_NAMES};
use crate::config::{ConfigError, ExperimentConfig};
use crate::mc::{self, AreRow, AreTable, EstimateCloud, McVerdict, PairSlope};
use crate::observation::{Case, CaseKey, DataType, Frequency};
use crate::optim::Termination;
use crate::par::{map_ordered, with_jobs};
use crate::seir::ParamVector;

pub const ARE_TABLES: &str = "are_tables.csv";
pub const MC_VERDICTS: &str = "mc_verdicts.csv";
pub const MC_ESTIMATES: &str = "mc_estimates.csv";
pub const SLOPES: &str = "slopes.csv";
pub const CM_CORRELATIONS: &str = "cm_correlations.csv";
pub const CM_VERDICTS: &str = "cm_verdicts.csv";
pub const CM_OVER_MC: &str = "cm_over_mc.csv";
pub const REPORT_MD: &str = "report.md";

const GREEK: [&str; 3] = ["β", "γ", "α"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Which parts of the pipeline to run. Cross-method analytics need both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub mc: bool,
    pub cm: bool,
}

impl Stages {
    pub const ALL: Self = Self { mc: true, cm: true };
    pub const MC_ONLY: Self = Self { mc: true, cm: false };
    pub const CM_ONLY: Self = Self { mc: false, cm: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub replicates: usize,
    pub sigmas: Vec<f64>,
    pub weighting: WeightMode,
    pub cm_threshold: f64,
    pub rtol: f64,
    pub atol: f64,
    pub f_tol: f64,
    pub x_tol: f64,
    pub max_iter: usize,
    pub cumulative_noise: String,
}

impl Provenance {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        Self {
            version: crate::VERSION.to_string(),
            seed: c.seed,
            replicates: c.replicates,
            sigmas: c.sigmas.clone(),
            weighting: c.weighting,
            cm_threshold: c.cm_threshold,
            rtol: c.integrator.rtol,
            atol: c.integrator.atol,
            f_tol: c.optimizer.f_tol,
            x_tol: c.optimizer.x_tol,
            max_iter: c.optimizer.max_iter,
            cumulative_noise: c.cumulative_noise.name().to_string(),
        }
    }

    fn header(&self) -> String {
        let sigmas: Vec<String> = self.sigmas.iter().map(|s| s.to_string()).collect();
        format!(
            "# seir-ident {}\n# seed={} replicates={} sigmas={} weighting={} cm_threshold={}\n\
             # rtol={} atol={} f_tol={} x_tol={} max_iter={} cumulative_noise={}\n",
            self.version,
            self.seed,
            self.replicates,
            sigmas.join(";"),
            self.weighting.name(),
            self.cm_threshold,
            self.rtol,
            self.atol,
            self.f_tol,
            self.x_tol,
            self.max_iter,
            self.cumulative_noise,
        )
    }
}

/// Correlation-matrix outcome at the true parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum CmOutcome {
    Assessed(CmResult),
    Noninvertible { condition: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeRow {
    pub sigma: f64,
    pub slopes: [PairSlope; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub key: CaseKey,
    pub truth: ParamVector,
    pub are: Option<AreTable>,
    pub mc_verdict: Option<McVerdict>,
    pub clouds: Vec<EstimateCloud>,
    pub slopes: Vec<SlopeRow>,
    pub cm: Option<CmOutcome>,
    pub cm_over_mc: Vec<(f64, CloudCm)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailure {
    pub key: CaseKey,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentReport {
    pub provenance: Provenance,
    pub stages: Stages,
    pub cases: Vec<CaseReport>,
    pub failures: Vec<CaseFailure>,
}

impl IdentReport {
    pub fn status(&self) -> RunStatus {
        match (self.cases.is_empty(), self.failures.is_empty()) {
            (_, true) => RunStatus::Complete,
            (true, false) => RunStatus::Failed,
            (false, false) => RunStatus::Partial,
        }
    }

    pub fn case(&self, key: &CaseKey) -> Option<&CaseReport> {
        self.cases.iter().find(|c| c.key == *key)
    }
}

fn run_case(case: &Case, config: &ExperimentConfig, stages: Stages) -> Result<CaseReport, String> {
    let key = case.key();
    let tol = config.integrator;
    let mut report = CaseReport {
        key,
        truth: case.truth(),
        are: None,
        mc_verdict: None,
        clouds: Vec::new(),
        slopes: Vec::new(),
        cm: None,
        cm_over_mc: Vec::new(),
    };

    if stages.cm {
        report.cm = Some(match cm::assess(case, &case.truth(), &tol, config.weighting, config.cm_threshold) {
            Ok(r) => CmOutcome::Assessed(r),
            Err(CmError::Noninvertible { condition }) => CmOutcome::Noninvertible { condition },
            Err(e) => return Err(e.to_string()),
        });
    }

    if stages.mc {
        let run = mc::run_mc(case, &config.mc_options()).map_err(|e| e.to_string())?;
        report.mc_verdict = Some(mc::classify_mc(&run.are));
        for cloud in &run.clouds {
            let params = cloud.params();
            if let Ok(slopes) = mc::estimate_pair_slopes(&params, &cloud.truth) {
                report.slopes.push(SlopeRow {
                    sigma: cloud.sigma,
                    slopes,
                });
            }
            if stages.cm {
                let summary = if cloud.sigma == 0.0 && !params.is_empty() {
                    // Every zero-noise estimate is the same point.
                    let one = cm::cm_over_cloud(case, &params[..1], &tol, config.weighting, config.cm_threshold);
                    let n = params.len();
                    CloudCm {
                        evaluated: n,
                        identifiable: one.identifiable * n,
                        omitted: one.omitted * n,
                        failed: one.failed * n,
                    }
                } else {
                    cm::cm_over_cloud(case, &params, &tol, config.weighting, config.cm_threshold)
                };
                report.cm_over_mc.push((cloud.sigma, summary));
            }
        }
        report.are = Some(run.are);
        report.clouds = run.clouds;
    }
    Ok(report)
}

/// Runs the selected stages over every configured case, in memory.
pub fn run_cases(config: &ExperimentConfig, stages: Stages) -> Result<IdentReport, ReportError> {
    config.validate()?;
    let cases = config.build_cases()?;
    let outcomes = with_jobs(config.jobs, || {
        map_ordered(&cases, |case| {
            log::info!("running {}", case.key());
            let r = run_case(case, config, stages);
            if let Err(e) = &r {
                log::error!("{} failed: {e}", case.key());
            }
            r
        })
    });
    let mut report = IdentReport {
        provenance: Provenance::from_config(config),
        stages,
        cases: Vec::new(),
        failures: Vec::new(),
    };
    for (case, outcome) in cases.iter().zip(outcomes) {
        match outcome {
            Ok(r) => report.cases.push(r),
            Err(message) => report.failures.push(CaseFailure {
                key: case.key(),
                message,
            }),
        }
    }
    Ok(report)
}

/// Runs every stage and writes all outputs to `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<IdentReport, ReportError> {
    let report = run_cases(config, Stages::ALL)?;
    write_outputs(&report, &config.output_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreRecord {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
    pub replicates: usize,
    pub sigma: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub retained: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McVerdictRecord {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
    pub beta: bool,
    pub gamma: bool,
    pub alpha: bool,
    pub all: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
    pub replicate: usize,
    pub sigma: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub fval_est: f64,
    pub fval_true: f64,
    pub normalized_fval: Option<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub true_beta: f64,
    pub true_gamma: f64,
    pub true_alpha: f64,
}

impl EstimateRecord {
    pub fn key(&self) -> CaseKey {
        CaseKey {
            scenario: self.scenario,
            data_type: self.data_type,
            frequency: self.frequency,
        }
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::new(self.beta, self.gamma, self.alpha)
    }

    pub fn truth(&self) -> ParamVector {
        ParamVector::new(self.true_beta, self.true_gamma, self.true_alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRecord {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
    pub sigma: f64,
    pub pair: String,
    pub slope: Option<f64>,
    pub correlated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmCorrelationRecord {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
    pub beta_gamma: Option<f64>,
    pub beta_alpha: Option<f64>,
    pub gamma_alpha: Option<f64>,
    pub condition: Option<f64>,
    pub scaled_condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmVerdictRecord {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
    /// Empty when the information matrix was not invertible.
    pub identifiable: Option<bool>,
    pub max_abs_correlation: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmOverMcRecord {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
    pub sigma: f64,
    pub evaluated: usize,
    pub identifiable: usize,
    pub omitted: usize,
    pub failed: usize,
    pub percent: Option<f64>,
}

fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<(), ReportError> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let io = |source| ReportError::Io {
        path: path.clone(),
        source,
    };
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, &path).map_err(io)
}

fn csv_bytes<T: Serialize>(header: &str, extra: &str, rows: &[T], name: &str) -> Result<Vec<u8>, ReportError> {
    let mut out = header.as_bytes().to_vec();
    out.extend_from_slice(extra.as_bytes());
    let mut w = csv::Writer::from_writer(out);
    let err = |source| ReportError::Csv {
        path: PathBuf::from(name),
        source,
    };
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| ReportError::Io {
        path: PathBuf::from(name),
        source: e.into_error(),
    })
}

/// Reads one of the result tables, skipping its comment header.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(err)
}

fn are_records(report: &IdentReport) -> Vec<AreRecord> {
    let mut out = Vec::new();
    for c in &report.cases {
        let Some(t) = &c.are else { continue };
        for r in &t.rows {
            out.push(AreRecord {
                scenario: c.key.scenario,
                data_type: c.key.data_type,
                frequency: c.key.frequency,
                replicates: t.replicates,
                sigma: r.sigma,
                beta: r.are[0],
                gamma: r.are[1],
                alpha: r.are[2],
                retained: r.retained,
                excluded: r.excluded,
            });
        }
    }
    out
}

fn cm_records(report: &IdentReport) -> (Vec<CmCorrelationRecord>, Vec<CmVerdictRecord>) {
    let mut corr = Vec::new();
    let mut verdicts = Vec::new();
    let threshold = report.provenance.cm_threshold;
    for c in &report.cases {
        let Some(outcome) = &c.cm else { continue };
        let (k, s, f) = (c.key.scenario, c.key.data_type, c.key.frequency);
        match outcome {
            CmOutcome::Assessed(r) => {
                let chi = r.verdict.correlations.0;
                corr.push(CmCorrelationRecord {
                    scenario: k,
                    data_type: s,
                    frequency: f,
                    beta_gamma: Some(chi[0]),
                    beta_alpha: Some(chi[1]),
                    gamma_alpha: Some(chi[2]),
                    condition: Some(r.fisher.condition),
                    scaled_condition: r.fisher.scaled_condition,
                });
                verdicts.push(CmVerdictRecord {
                    scenario: k,
                    data_type: s,
                    frequency: f,
                    identifiable: Some(r.verdict.identifiable),
                    max_abs_correlation: Some(r.verdict.correlations.max_abs()),
                    threshold,
                });
            }
            CmOutcome::Noninvertible { condition } => {
                corr.push(CmCorrelationRecord {
                    scenario: k,
                    data_type: s,
                    frequency: f,
                    beta_gamma: None,
                    beta_alpha: None,
                    gamma_alpha: None,
                    condition: None,
                    scaled_condition: *condition,
                });
                verdicts.push(CmVerdictRecord {
                    scenario: k,
                    data_type: s,
                    frequency: f,
                    identifiable: None,
                    max_abs_correlation: None,
                    threshold,
                });
            }
        }
    }
    (corr, verdicts)
}

/// Writes every table the report's stages produced, plus `report.md`.
pub fn write_outputs(report: &IdentReport, dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let header = report.provenance.header();
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();

    if report.stages.mc {
        files.push((ARE_TABLES, csv_bytes(&header, "# ARE in percent\n", &are_records(report), ARE_TABLES)?));

        let verdicts: Vec<McVerdictRecord> = report
            .cases
            .iter()
            .filter_map(|c| {
                c.mc_verdict.map(|v| McVerdictRecord {
                    scenario: c.key.scenario,
                    data_type: c.key.data_type,
                    frequency: c.key.frequency,
                    beta: v.per_parameter[0],
                    gamma: v.per_parameter[1],
                    alpha: v.per_parameter[2],
                    all: v.identifiable,
                })
            })
            .collect();
        files.push((
            MC_VERDICTS,
            csv_bytes(&header, "# identifiable iff ARE <= 100*sigma at every sigma > 0\n", &verdicts, MC_VERDICTS)?,
        ));

        let mut estimates = Vec::new();
        for c in &report.cases {
            for cloud in &c.clouds {
                for e in &cloud.estimates {
                    estimates.push(EstimateRecord {
                        scenario: c.key.scenario,
                        data_type: c.key.data_type,
                        frequency: c.key.frequency,
                        replicate: e.replicate,
                        sigma: cloud.sigma,
                        beta: e.params.beta,
                        gamma: e.params.gamma,
                        alpha: e.params.alpha,
                        fval_est: e.fval_est,
                        fval_true: e.fval_true,
                        normalized_fval: mc::normalized_fval(e.fval_true, e.fval_est),
                        iterations: e.iterations,
                        termination: e.termination,
                        true_beta: c.truth.beta,
                        true_gamma: c.truth.gamma,
                        true_alpha: c.truth.alpha,
                    });
                }
            }
        }
        files.push((MC_ESTIMATES, csv_bytes(&header, "", &estimates, MC_ESTIMATES)?));

        let mut slopes = Vec::new();
        for c in &report.cases {
            for row in &c.slopes {
                for s in &row.slopes {
                    slopes.push(SlopeRecord {
                        scenario: c.key.scenario,
                        data_type: c.key.data_type,
                        frequency: c.key.frequency,
                        sigma: row.sigma,
                        pair: s.name(),
                        slope: s.slope,
                        correlated: s.correlated,
                    });
                }
            }
        }
        files.push((
            SLOPES,
            csv_bytes(
                &header,
                "# pair x:y = least-squares slope of y's relative error on x's; correlated iff 0.5 <= |slope| <= 2\n",
                &slopes,
                SLOPES,
            )?,
        ));
    }

    if report.stages.cm {
        let (corr, verdicts) = cm_records(report);
        files.push((
            CM_CORRELATIONS,
            csv_bytes(&header, "# correlations at the true parameters; empty when F^T W F is singular\n", &corr, CM_CORRELATIONS)?,
        ));
        files.push((CM_VERDICTS, csv_bytes(&header, "", &verdicts, CM_VERDICTS)?));
    }

    if report.stages.mc && report.stages.cm {
        let mut rows = Vec::new();
        for c in &report.cases {
            for (sigma, s) in &c.cm_over_mc {
                rows.push(CmOverMcRecord {
                    scenario: c.key.scenario,
                    data_type: c.key.data_type,
                    frequency: c.key.frequency,
                    sigma: *sigma,
                    evaluated: s.evaluated,
                    identifiable: s.identifiable,
                    omitted: s.omitted,
                    failed: s.failed,
                    percent: s.percent(),
                });
            }
        }
        files.push((
            CM_OVER_MC,
            csv_bytes(&header, "# percent = identifiable / (evaluated - omitted - failed)\n", &rows, CM_OVER_MC)?,
        ));
    }

    files.push((REPORT_MD, render_markdown(report).into_bytes()));
    for (name, bytes) in files {
        write_atomic(dir, name, &bytes)?;
    }
    Ok(())
}

/// MC verdicts recomputed from `are_tables.csv` records.
pub fn mc_verdicts_from_are(records: &[AreRecord]) -> BTreeMap<CaseKey, McVerdict> {
    let mut tables: BTreeMap<CaseKey, AreTable> = BTreeMap::new();
    for r in records {
        let key = CaseKey {
            scenario: r.scenario,
            data_type: r.data_type,
            frequency: r.frequency,
        };
        tables
            .entry(key)
            .or_insert_with(|| AreTable {
                case: key,
                replicates: r.replicates,
                rows: Vec::new(),
            })
            .rows
            .push(AreRow {
                sigma: r.sigma,
                are: [r.beta, r.gamma, r.alpha],
                retained: r.retained,
                excluded: r.excluded,
            });
    }
    tables.into_iter().map(|(k, t)| (k, mc::classify_mc(&t))).collect()
}

/// CM verdicts recomputed from `cm_correlations.csv` records.
pub fn cm_verdicts_from_correlations(records: &[CmCorrelationRecord], threshold: f64) -> BTreeMap<CaseKey, Option<bool>> {
    records
        .iter()
        .map(|r| {
            let key = CaseKey {
                scenario: r.scenario,
                data_type: r.data_type,
                frequency: r.frequency,
            };
            let verdict = match (r.beta_gamma, r.beta_alpha, r.gamma_alpha) {
                (Some(a), Some(b), Some(c)) => Some(cm::classify_cm(&cm::Correlations([a, b, c]), threshold).identifiable),
                _ => None,
            };
            (key, verdict)
        })
        .collect()
}

fn grid<F>(out: &mut String, report: &IdentReport, data_type: DataType, cell: F)
where
    F: Fn(&CaseReport) -> String,
{
    let _ = writeln!(out, "\n**{}**\n", data_type);
    let _ = writeln!(out, "| Scenario | Daily | Weekly | Monthly |");
    let _ = writeln!(out, "|---|---|---|---|");
    for s in 1..=4u8 {
        let cells: Vec<String> = Frequency::ALL
            .iter()
            .map(|&frequency| {
                let key = CaseKey {
                    scenario: s,
                    data_type,
                    frequency,
                };
                if let Some(c) = report.case(&key) {
                    cell(c)
                } else if report.failures.iter().any(|f| f.key == key) {
                    "failed".into()
                } else {
                    String::new()
                }
            })
            .collect();
        let _ = writeln!(out, "| S{s} | {} |", cells.join(" | "));
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "n/a".into())
}

/// Human-readable summary mirroring the verdict grids.
pub fn render_markdown(report: &IdentReport) -> String {
    let p = &report.provenance;
    let mut out = String::new();
    let _ = writeln!(out, "# SEIR practical identifiability report\n");
    let _ = writeln!(out, "- toolkit version: {}", p.version);
    let _ = writeln!(out, "- seed: {}, replicates: {}", p.seed, p.replicates);
    let sig: Vec<String> = p.sigmas.iter().map(|s| format!("{}%", s * 100.0)).collect();
    let _ = writeln!(out, "- noise levels: {}", sig.join(", "));
    let _ = writeln!(out, "- CM weighting: {}, threshold: {}", p.weighting.name(), p.cm_threshold);
    let _ = writeln!(out, "- integrator rtol/atol: {}/{}", p.rtol, p.atol);
    let _ = writeln!(out, "- cases completed: {}, failed: {}", report.cases.len(), report.failures.len());

    if report.stages.mc {
        let _ = writeln!(out, "\n## Monte Carlo: identifiable parameters\n");
        let _ = writeln!(out, "A parameter is listed when its ARE is at most the noise percentage at every noise level.");
        for dt in DataType::ALL {
            grid(&mut out, report, dt, |c| match c.mc_verdict {
                Some(v) => {
                    let names: Vec<&str> = (0..3).filter(|&k| v.per_parameter[k]).map(|k| GREEK[k]).collect();
                    if names.is_empty() {
                        "none".into()
                    } else {
                        names.join(" ")
                    }
                }
                None => String::new(),
            });
        }

        let _ = writeln!(out, "\n## Monte Carlo: ARE (%) by noise level\n");
        let _ = writeln!(out, "| Case | σ | ARE β | ARE γ | ARE α | excluded |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for c in &report.cases {
            let Some(t) = &c.are else { continue };
            for r in &t.rows {
                let _ = writeln!(
                    out,
                    "| {} | {}% | {:.2} | {:.2} | {:.2} | {} |",
                    c.key,
                    r.sigma * 100.0,
                    r.are[0],
                    r.are[1],
                    r.are[2],
                    r.excluded
                );
            }
        }
    }

    if report.stages.cm {
        let _ = writeln!(out, "\n## Correlation matrix: identifiable at the true parameters\n");
        for dt in DataType::ALL {
            grid(&mut out, report, dt, |c| match &c.cm {
                Some(CmOutcome::Assessed(r)) => if r.verdict.identifiable { "Yes" } else { "No" }.into(),
                Some(CmOutcome::Noninvertible { .. }) => "singular".into(),
                None => String::new(),
            });
        }
        let _ = writeln!(out, "\n## Correlation matrix: correlations at the true parameters\n");
        let _ = writeln!(out, "| Case | {} | {} | {} |", CM_PAIR_NAMES[0], CM_PAIR_NAMES[1], CM_PAIR_NAMES[2]);
        let _ = writeln!(out, "|---|---|---|---|");
        for c in &report.cases {
            if let Some(CmOutcome::Assessed(r)) = &c.cm {
                let chi = r.verdict.correlations.0;
                let _ = writeln!(out, "| {} | {:.2} | {:.2} | {:.2} |", c.key, chi[0], chi[1], chi[2]);
            }
        }
    }

    if report.stages.mc && report.stages.cm {
        let _ = writeln!(out, "\n## Correlation matrix applied to Monte Carlo estimates\n");
        let _ = writeln!(out, "Percentage of estimates judged identifiable; singular information matrices are omitted.\n");
        let _ = write!(out, "| Case |");
        for s in &p.sigmas {
            let _ = write!(out, " {}% |", s * 100.0);
        }
        let _ = writeln!(out, " omitted |");
        let _ = writeln!(out, "|---|{}---|", "---|".repeat(p.sigmas.len()));
        for c in &report.cases {
            let _ = write!(out, "| {} |", c.key);
            let mut omitted = 0;
            for (_, s) in &c.cm_over_mc {
                omitted += s.omitted;
                let _ = write!(out, " {} |", fmt_opt(s.percent(), 1));
            }
            let _ = writeln!(out, " {omitted} |");
        }

        let _ = writeln!(out, "\n## Slopes between estimate errors at the largest noise level\n");
        let _ = writeln!(out, "Slope of the second parameter's relative error on the first's; `*` marks 0.5 <= |slope| <= 2.\n");
        let _ = writeln!(out, "| Case | β:γ | β:α | α:γ |");
        let _ = writeln!(out, "|---|---|---|---|");
        for c in &report.cases {
            if let Some(row) = c.slopes.last() {
                let cells: Vec<String> = row
                    .slopes
                    .iter()
                    .map(|s| format!("{}{}", fmt_opt(s.slope, 2), if s.correlated { "*" } else { "" }))
                    .collect();
                let _ = writeln!(out, "| {} | {} |", c.key, cells.join(" | "));
            }
        }
    }

    if !report.failures.is_empty() {
        let _ = writeln!(out, "\n## Failed cases\n");
        for f in &report.failures {
            let _ = writeln!(out, "- {}: {}", f.key, f.message);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CaseSpec;

    fn small_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            replicates: 3,
            sigmas: vec![0.0, 0.2],
            output_dir: dir.to_path_buf(),
            cases: vec![
                CaseSpec {
                    scenario: 3,
                    data_type: DataType::Incidence,
                    frequency: Frequency::Monthly,
                },
                CaseSpec {
                    scenario: 1,
                    data_type: DataType::Prevalence,
                    frequency: Frequency::Monthly,
                },
            ],
            ..Default::default()
        }
    }

    #[test]
    fn writes_every_table_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&small_config(dir.path())).unwrap();
        assert_eq!(report.status(), RunStatus::Complete);
        for name in [ARE_TABLES, MC_VERDICTS, MC_ESTIMATES, SLOPES, CM_CORRELATIONS, CM_VERDICTS, CM_OVER_MC] {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            assert!(text.starts_with("# seir-ident "), "{name}");
            assert!(text.contains("seed=20240101 replicates=3"), "{name}");
            assert!(text.contains("weighting=inverse-square"), "{name}");
        }
        let md = fs::read_to_string(dir.path().join(REPORT_MD)).unwrap();
        assert!(md.contains("| S3 |"));
        assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));

        let are: Vec<AreRecord> = read_records(&dir.path().join(ARE_TABLES)).unwrap();
        assert_eq!(are.len(), 4);
        let est: Vec<EstimateRecord> = read_records(&dir.path().join(MC_ESTIMATES)).unwrap();
        assert_eq!(est.len(), 2 * 2 * 3);
        assert!(est.iter().filter(|e| e.sigma == 0.0).all(|e| e.params() == e.truth()));
    }

    #[test]
    fn verdicts_are_recomputable_from_tables() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&small_config(dir.path())).unwrap();
        let are: Vec<AreRecord> = read_records(&dir.path().join(ARE_TABLES)).unwrap();
        let recomputed = mc_verdicts_from_are(&are);
        for c in &report.cases {
            assert_eq!(recomputed[&c.key], c.mc_verdict.unwrap());
        }
        let corr: Vec<CmCorrelationRecord> = read_records(&dir.path().join(CM_CORRELATIONS)).unwrap();
        let cmv = cm_verdicts_from_correlations(&corr, report.provenance.cm_threshold);
        let stored: Vec<CmVerdictRecord> = read_records(&dir.path().join(CM_VERDICTS)).unwrap();
        for s in stored {
            let key = CaseKey {
                scenario: s.scenario,
                data_type: s.data_type,
                frequency: s.frequency,
            };
            assert_eq!(cmv[&key], s.identifiable);
        }
    }

    #[test]
    fn cm_only_run_skips_mc_tables() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let report = run_cases(&config, Stages::CM_ONLY).unwrap();
        write_outputs(&report, dir.path()).unwrap();
        assert!(dir.path().join(CM_VERDICTS).exists());
        assert!(!dir.path().join(ARE_TABLES).exists());
        assert!(report.cases.iter().all(|c| c.are.is_none() && c.cm.is_some()));
    }

    #[test]
    fn status_reflects_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = run_cases(&small_config(dir.path()), Stages::CM_ONLY).unwrap();
        let key = report.cases[0].key;
        report.failures.push(CaseFailure {
            key,
            message: "boom".into(),
        });
        assert_eq!(report.status(), RunStatus::Partial);
        report.cases.clear();
        assert_eq!(report.status(), RunStatus::Failed);
        assert!(render_markdown(&report).contains("boom"));
    }
}
