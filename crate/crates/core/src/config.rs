//! TOML experiment configuration.
//!
//! Every key is optional; an empty file selects the full default grid.
//!
//! ```toml
//! scenarios = [1, 2, 3, 4]
//! data_types = ["prevalence", "incidence", "cumulative"]
//! frequencies = ["daily", "weekly", "monthly"]
//! sigmas = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3]
//! replicates = 500
//! seed = 20240101
//! weighting = "inverse-square"      # or "literal"
//! cm_threshold = 0.9
//! cumulative_noise = "multiplicative" # or "accumulated-incidence"
//! output_dir = "results"
//! jobs = 0                           # 0 = one per core
//!
//! [optimizer]
//! max_iter = 2000
//! f_tol = 1e-10
//! x_tol = 1e-8
//!
//! [integrator]
//! rtol = 1e-8
//! atol = 1e-10
//!
//! # Optional explicit case list; replaces the grid above.
//! [[cases]]
//! scenario = 1
//! data_type = "prevalence"
//! frequency = "daily"
//!
//! # Optional per-scenario overrides.
//! [scenario.2]
//! beta = 0.0008
//! initial = { s = 995.0, e = 0.0, i = 5.0, r = 0.0, c = 5.0 }
//! ```
//!
//! The grid form skips (scenario, frequency) pairs with too few
//! observations; listing such a pair under `[[cases]]` is an error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cm::{WeightMode, DEFAULT_THRESHOLD};
use crate::mc::McOptions;
use crate::observation::{build_case, Case, CaseKey, DataType, Frequency, Scenario};
use crate::optim::NelderMeadOptions;
use crate::seir::{StateVector, Tolerances};
use crate::synth::{CumulativeNoise, DEFAULT_SIGMAS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Parse(String),
    #[error("{}", Problems(.0))]
    Invalid(Vec<String>),
}

struct Problems<'a>(&'a [String]);

impl fmt::Display for Problems<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration ({} problem{})", self.0.len(), if self.0.len() == 1 { "" } else { "s" })?;
        for p in self.0 {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
}

impl From<CaseKey> for CaseSpec {
    fn from(k: CaseKey) -> Self {
        Self {
            scenario: k.scenario,
            data_type: k.data_type,
            frequency: k.frequency,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<StateVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenarios: Vec<u8>,
    pub data_types: Vec<DataType>,
    pub frequencies: Vec<Frequency>,
    pub sigmas: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub weighting: WeightMode,
    pub cm_threshold: f64,
    pub cumulative_noise: CumulativeNoise,
    pub output_dir: PathBuf,
    pub jobs: usize,
    pub optimizer: NelderMeadOptions,
    pub integrator: Tolerances,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<CaseSpec>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub scenario: BTreeMap<String, ScenarioOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mc = McOptions::default();
        Self {
            scenarios: vec![1, 2, 3, 4],
            data_types: DataType::ALL.to_vec(),
            frequencies: Frequency::ALL.to_vec(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
            replicates: mc.replicates,
            seed: mc.seed,
            weighting: WeightMode::default(),
            cm_threshold: DEFAULT_THRESHOLD,
            cumulative_noise: CumulativeNoise::default(),
            output_dir: PathBuf::from("results"),
            jobs: 0,
            optimizer: NelderMeadOptions::default(),
            integrator: Tolerances::default(),
            cases: Vec::new(),
            scenario: BTreeMap::new(),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "scenarios",
    "data_types",
    "frequencies",
    "sigmas",
    "replicates",
    "seed",
    "weighting",
    "cm_threshold",
    "cumulative_noise",
    "output_dir",
    "jobs",
    "optimizer",
    "integrator",
    "cases",
    "scenario",
];
const OPTIMIZER_KEYS: &[&str] = &["max_iter", "max_evals", "f_tol", "x_tol", "initial_step", "zero_step", "stall_iter"];
const INTEGRATOR_KEYS: &[&str] = &["rtol", "atol"];
const CASE_KEYS: &[&str] = &["scenario", "data_type", "frequency"];
const OVERRIDE_KEYS: &[&str] = &["beta", "gamma", "alpha", "initial"];
const STATE_KEYS: &[&str] = &["s", "e", "i", "r", "c"];

fn unknown_keys(table: &toml::Table, allowed: &[&str], prefix: &str, out: &mut Vec<String>) {
    for k in table.keys() {
        if !allowed.contains(&k.as_str()) {
            out.push(format!("unknown key `{prefix}{k}`"));
        }
    }
}

fn collect_unknown(root: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    unknown_keys(root, TOP_KEYS, "", &mut out);
    if let Some(toml::Value::Table(t)) = root.get("optimizer") {
        unknown_keys(t, OPTIMIZER_KEYS, "optimizer.", &mut out);
    }
    if let Some(toml::Value::Table(t)) = root.get("integrator") {
        unknown_keys(t, INTEGRATOR_KEYS, "integrator.", &mut out);
    }
    if let Some(toml::Value::Array(cases)) = root.get("cases") {
        for (n, c) in cases.iter().enumerate() {
            if let toml::Value::Table(t) = c {
                unknown_keys(t, CASE_KEYS, &format!("cases[{n}]."), &mut out);
            }
        }
    }
    if let Some(toml::Value::Table(s)) = root.get("scenario") {
        for (id, v) in s {
            if let toml::Value::Table(t) = v {
                let prefix = format!("scenario.{id}.");
                unknown_keys(t, OVERRIDE_KEYS, &prefix, &mut out);
                if let Some(toml::Value::Table(init)) = t.get("initial") {
                    unknown_keys(init, STATE_KEYS, &format!("{prefix}initial."), &mut out);
                }
            }
        }
    }
    out
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let unknown = collect_unknown(&root);
        if !unknown.is_empty() {
            return Err(ConfigError::Invalid(unknown));
        }
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        for s in &self.scenarios {
            if !(1..=4).contains(s) {
                problems.push(format!("scenario {s} does not exist (expected 1-4)"));
            }
        }
        if self.sigmas.is_empty() {
            problems.push("sigmas must not be empty".into());
        }
        for s in &self.sigmas {
            if !(s.is_finite() && *s >= 0.0) {
                problems.push(format!("noise level {s} must be finite and non-negative"));
            }
        }
        if self.sigmas.first().is_some_and(|s| *s != 0.0) {
            problems.push("sigmas must start at 0".into());
        }
        if self.sigmas.windows(2).any(|w| !(w[1] > w[0])) {
            problems.push("sigmas must be strictly increasing".into());
        }
        if self.replicates == 0 {
            problems.push("replicates must be at least 1".into());
        }
        if self.seed > i64::MAX as u64 {
            problems.push("seed must fit in a signed 64-bit integer".into());
        }
        if !(self.cm_threshold > 0.0 && self.cm_threshold <= 1.0) {
            problems.push(format!("cm_threshold {} must lie in (0, 1]", self.cm_threshold));
        }
        if !self.integrator.is_valid() {
            problems.push("integrator tolerances must be finite and positive".into());
        }
        let o = &self.optimizer;
        if o.max_iter == 0 || o.max_evals == 0 {
            problems.push("optimizer.max_iter and optimizer.max_evals must be positive".into());
        }
        if !(o.f_tol >= 0.0 && o.x_tol >= 0.0 && o.initial_step > 0.0 && o.zero_step > 0.0) {
            problems.push("optimizer tolerances must be non-negative and steps positive".into());
        }
        for (id, ov) in &self.scenario {
            match id.parse::<u8>() {
                Ok(1..=4) => {}
                _ => problems.push(format!("[scenario.{id}] does not name a scenario 1-4")),
            }
            for (name, v) in [("beta", ov.beta), ("gamma", ov.gamma), ("alpha", ov.alpha)] {
                if let Some(v) = v {
                    if !(v > 0.0 && v <= 1.0) {
                        problems.push(format!("scenario.{id}.{name} = {v} must lie in (0, 1]"));
                    }
                }
            }
            if let Some(init) = ov.initial {
                if !init.is_finite() || init.to_array().iter().any(|v| *v < 0.0) {
                    problems.push(format!("scenario.{id}.initial must be finite and non-negative"));
                }
            }
        }
        for c in &self.cases {
            match Scenario::reference(c.scenario) {
                Ok(s) => {
                    if let Err(e) = build_case(&s, c.data_type, c.frequency) {
                        problems.push(e.to_string());
                    }
                }
                Err(e) => problems.push(e.to_string()),
            }
        }
        if problems.is_empty() && self.case_keys().is_empty() {
            problems.push("the configuration selects no valid case".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// The selected cases, in scenario, data type, frequency order.
    pub fn case_keys(&self) -> Vec<CaseKey> {
        if !self.cases.is_empty() {
            return self
                .cases
                .iter()
                .map(|c| CaseKey {
                    scenario: c.scenario,
                    data_type: c.data_type,
                    frequency: c.frequency,
                })
                .collect();
        }
        let mut keys = Vec::new();
        for &scenario in &self.scenarios {
            let Ok(s) = Scenario::reference(scenario) else { continue };
            for &data_type in &self.data_types {
                for &frequency in &self.frequencies {
                    if build_case(&s, data_type, frequency).is_ok() {
                        keys.push(CaseKey {
                            scenario,
                            data_type,
                            frequency,
                        });
                    }
                }
            }
        }
        keys.sort();
        keys.dedup();
        keys
    }

    /// Reference scenario `id` with any configured overrides applied.
    pub fn scenario(&self, id: u8) -> Result<Scenario, ConfigError> {
        let mut s = Scenario::reference(id).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        if let Some(ov) = self.scenario.get(&id.to_string()) {
            if let Some(v) = ov.beta {
                s.true_params.beta = v;
            }
            if let Some(v) = ov.gamma {
                s.true_params.gamma = v;
            }
            if let Some(v) = ov.alpha {
                s.true_params.alpha = v;
            }
            if let Some(init) = ov.initial {
                s.init = init;
            }
        }
        Ok(s)
    }

    pub fn build_cases(&self) -> Result<Vec<Case>, ConfigError> {
        self.case_keys()
            .into_iter()
            .map(|k| {
                let s = self.scenario(k.scenario)?;
                build_case(&s, k.data_type, k.frequency).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))
            })
            .collect()
    }

    pub fn mc_options(&self) -> McOptions {
        McOptions {
            sigmas: self.sigmas.clone(),
            replicates: self.replicates,
            seed: self.seed,
            optimizer: self.optimizer,
            tolerances: self.integrator,
            cumulative_noise: self.cumulative_noise,
        }
    }
}
