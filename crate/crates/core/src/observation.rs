//! Observable data types, sampling schedules and the four outbreak scenarios.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seir::{daily_grid, integrate, IntegrationError, ParamVector, StateVector, Tolerances, Trajectory};

/// Number of estimated parameters; a case needs at least this many points.
pub const MIN_OBSERVATIONS: usize = 3;

/// Total population of the calibrated default initial condition.
pub const DEFAULT_POPULATION: f64 = 1000.0;
/// Initially infectious individuals of the calibrated default initial condition.
pub const DEFAULT_INITIAL_INFECTIOUS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObservationError {
    #[error("observation time {time} is not on the trajectory grid (ends at {end})")]
    OutOfRange { time: f64, end: f64 },
    #[error("scenario {scenario} with {frequency} sampling yields {points} observations; at least {MIN_OBSERVATIONS} are required")]
    UnsupportedCase {
        scenario: u8,
        frequency: Frequency,
        points: usize,
    },
    #[error("unknown scenario {0}; expected 1-4")]
    UnknownScenario(u8),
    #[error("cannot parse {kind} from {value:?}")]
    Parse { kind: &'static str, value: String },
}

/// Which function of the state is observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataType {
    #[serde(rename = "prevalence")]
    Prevalence,
    #[serde(rename = "incidence")]
    Incidence,
    #[serde(rename = "cumulative")]
    CumulativeIncidence,
}

impl DataType {
    pub const ALL: [DataType; 3] = [Self::Prevalence, Self::Incidence, Self::CumulativeIncidence];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Prevalence => "prevalence",
            Self::Incidence => "incidence",
            Self::CumulativeIncidence => "cumulative",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataType {
    type Err = ObservationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "prevalence" | "prev" => Ok(Self::Prevalence),
            "incidence" | "inc" => Ok(Self::Incidence),
            "cumulative" | "cumulative-incidence" | "cum" => Ok(Self::CumulativeIncidence),
            _ => Err(ObservationError::Parse {
                kind: "data type",
                value: s.to_string(),
            }),
        }
    }
}

/// Sampling interval. A month is exactly 30 days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Daily,
    Weekly,
    Monthly,
}

impl Frequency {
    pub const ALL: [Frequency; 3] = [Self::Daily, Self::Weekly, Self::Monthly];

    pub fn days(&self) -> u32 {
        match self {
            Self::Daily => 1,
            Self::Weekly => 7,
            Self::Monthly => 30,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Daily => "daily",
            Self::Weekly => "weekly",
            Self::Monthly => "monthly",
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Frequency {
    type Err = ObservationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "daily" | "d" => Ok(Self::Daily),
            "weekly" | "w" => Ok(Self::Weekly),
            "monthly" | "m" => Ok(Self::Monthly),
            _ => Err(ObservationError::Parse {
                kind: "frequency",
                value: s.to_string(),
            }),
        }
    }
}

/// Observation times `t_i = i * interval` for `i = 1..=floor(span / interval)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    pub frequency: Frequency,
    pub span: u32,
    times: Vec<f64>,
}

impl SamplingSchedule {
    pub fn new(frequency: Frequency, span: u32) -> Self {
        let step = frequency.days();
        let times = (1..=span / step).map(|i| f64::from(i * step)).collect();
        Self {
            frequency,
            span,
            times,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A true parameter set, initial condition and observation window.
///
/// Scenarios 3 and 4 observe only the start of the scenario 1 and 2
/// outbreaks; `source_span` is the length of the trajectory they are cut
/// from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u8,
    pub true_params: ParamVector,
    pub init: StateVector,
    pub span: u32,
    pub peak_day: u32,
    pub source_span: u32,
}

/// Calibrated default initial condition: N = 1000 with ten index cases,
/// which are also counted in the cumulative class.
pub fn default_initial_state() -> StateVector {
    StateVector::new(
        DEFAULT_POPULATION - DEFAULT_INITIAL_INFECTIOUS,
        0.0,
        DEFAULT_INITIAL_INFECTIOUS,
        0.0,
        DEFAULT_INITIAL_INFECTIOUS,
    )
}

impl Scenario {
    /// One of the four reference scenarios.
    pub fn reference(id: u8) -> Result<Self, ObservationError> {
        let slow = ParamVector::new(1e-4, 0.2, 0.03);
        let fast = ParamVector::new(1e-3, 0.2, 0.03);
        let (true_params, span, peak_day, source_span) = match id {
            1 => (slow, 365, 109, 365),
            2 => (fast, 50, 25, 50),
            3 => (slow, 100, 109, 365),
            4 => (fast, 20, 25, 50),
            _ => return Err(ObservationError::UnknownScenario(id)),
        };
        Ok(Self {
            id,
            true_params,
            init: default_initial_state(),
            span,
            peak_day,
            source_span,
        })
    }

    pub fn all_reference() -> Vec<Self> {
        (1..=4).map(|id| Self::reference(id).expect("ids 1-4 exist")).collect()
    }

    /// The scenario whose trajectory this one truncates (itself for 1 and 2).
    pub fn source_id(&self) -> u8 {
        match self.id {
            3 => 1,
            4 => 2,
            id => id,
        }
    }

    pub fn population(&self) -> f64 {
        self.init.population()
    }

    /// Daily trajectory of the full source outbreak at the true parameters.
    pub fn source_trajectory(&self, tol: &Tolerances) -> Result<Trajectory, IntegrationError> {
        integrate(&self.true_params, &self.init, &daily_grid(self.source_span), false, tol)
    }
}

/// A time series of one observable on a sampling schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub data_type: DataType,
    pub schedule: SamplingSchedule,
    pub values: Vec<f64>,
    /// Fractional noise standard deviation; zero for clean series.
    pub noise_level: f64,
}

impl ObservationSeries {
    pub fn times(&self) -> &[f64] {
        self.schedule.times()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn lookup<'a>(traj: &'a Trajectory, t: f64) -> Result<&'a StateVector, ObservationError> {
    traj.state_at(t).ok_or(ObservationError::OutOfRange {
        time: t,
        end: traj.end_time(),
    })
}

/// Samples `data_type` from `traj` at the schedule's times.
///
/// Incidence at `t_i` is `C(t_i) - C(t_{i-1})` with `t_0 = 0`.
pub fn observe(
    traj: &Trajectory,
    data_type: DataType,
    schedule: &SamplingSchedule,
) -> Result<ObservationSeries, ObservationError> {
    let mut values = Vec::with_capacity(schedule.len());
    let mut prev_c = traj.states.first().map(|s| s.c).unwrap_or(0.0);
    for &t in schedule.times() {
        let x = lookup(traj, t)?;
        values.push(match data_type {
            DataType::Prevalence => x.i,
            DataType::CumulativeIncidence => x.c,
            DataType::Incidence => x.c - prev_c,
        });
        prev_c = x.c;
    }
    Ok(ObservationSeries {
        data_type,
        schedule: schedule.clone(),
        values,
        noise_level: 0.0,
    })
}

/// Identifies a case in the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaseKey {
    pub scenario: u8,
    pub data_type: DataType,
    pub frequency: Frequency,
}

impl fmt::Display for CaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}-{}-{}", self.scenario, self.data_type, self.frequency)
    }
}

/// A fully resolved (scenario, observable, schedule) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub scenario: Scenario,
    pub data_type: DataType,
    pub schedule: SamplingSchedule,
}

/// Resolves a case, rejecting combinations that leave fewer observations
/// than parameters (scenario 2 monthly, scenario 4 weekly or monthly).
pub fn build_case(
    scenario: &Scenario,
    data_type: DataType,
    frequency: Frequency,
) -> Result<Case, ObservationError> {
    let schedule = SamplingSchedule::new(frequency, scenario.span);
    if schedule.len() < MIN_OBSERVATIONS {
        return Err(ObservationError::UnsupportedCase {
            scenario: scenario.id,
            frequency,
            points: schedule.len(),
        });
    }
    Ok(Case {
        scenario: scenario.clone(),
        data_type,
        schedule,
    })
}

impl Case {
    pub fn key(&self) -> CaseKey {
        CaseKey {
            scenario: self.scenario.id,
            data_type: self.data_type,
            frequency: self.schedule.frequency,
        }
    }

    pub fn truth(&self) -> ParamVector {
        self.scenario.true_params
    }

    /// Clean observations at the true parameters, cut from the source
    /// scenario's full trajectory.
    pub fn clean_series(&self, tol: &Tolerances) -> Result<ObservationSeries, CaseError> {
        let traj = self.scenario.source_trajectory(tol)?;
        Ok(observe(&traj, self.data_type, &self.schedule)?)
    }

    /// Model output at `params`, integrating only as far as the schedule needs.
    pub fn model_series(&self, params: &ParamVector, tol: &Tolerances) -> Result<ObservationSeries, CaseError> {
        let traj = integrate(params, &self.scenario.init, self.schedule.times(), false, tol)?;
        Ok(observe(&traj, self.data_type, &self.schedule)?)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1_daily_traj() -> Trajectory {
        Scenario::reference(1).unwrap().source_trajectory(&Tolerances::default()).unwrap()
    }

    #[test]
    fn schedule_sizes() {
        let s1 = Scenario::reference(1).unwrap();
        let s3 = Scenario::reference(3).unwrap();
        assert_eq!(build_case(&s1, DataType::Prevalence, Frequency::Daily).unwrap().schedule.len(), 365);
        let monthly = build_case(&s3, DataType::Prevalence, Frequency::Monthly).unwrap();
        assert_eq!(monthly.schedule.times(), &[30.0, 60.0, 90.0]);
    }

    #[test]
    fn blank_cells_are_unsupported() {
        let s2 = Scenario::reference(2).unwrap();
        let s4 = Scenario::reference(4).unwrap();
        for (s, f) in [(&s4, Frequency::Weekly), (&s4, Frequency::Monthly), (&s2, Frequency::Monthly)] {
            assert!(matches!(
                build_case(s, DataType::Incidence, f),
                Err(ObservationError::UnsupportedCase { .. })
            ));
        }
        assert!(build_case(&s2, DataType::Incidence, Frequency::Weekly).is_ok());
    }

    #[test]
    fn incidence_telescopes_to_cumulative() {
        let traj = s1_daily_traj();
        let daily = SamplingSchedule::new(Frequency::Daily, 365);
        let inc = observe(&traj, DataType::Incidence, &daily).unwrap();
        let total: f64 = inc.values.iter().sum();
        let c = &traj.states;
        let expect = c.last().unwrap().c - c[0].c;
        assert!((total - expect).abs() <= 1e-9 * expect);

        let weekly = observe(&traj, DataType::Incidence, &SamplingSchedule::new(Frequency::Weekly, 365)).unwrap();
        let first_week: f64 = inc.values[..7].iter().sum();
        assert!((weekly.values[0] - first_week).abs() <= 1e-9 * first_week);
    }

    #[test]
    fn weekly_prevalence_subsamples_daily() {
        let traj = s1_daily_traj();
        let daily = observe(&traj, DataType::Prevalence, &SamplingSchedule::new(Frequency::Daily, 365)).unwrap();
        let weekly = observe(&traj, DataType::Prevalence, &SamplingSchedule::new(Frequency::Weekly, 365)).unwrap();
        for (k, v) in weekly.values.iter().enumerate() {
            assert_eq!(*v, daily.values[7 * (k + 1) - 1]);
        }
    }

    #[test]
    fn clean_series_are_nonnegative_and_cumulative_is_monotone() {
        for scenario in Scenario::all_reference() {
            for dt in DataType::ALL {
                for f in Frequency::ALL {
                    let Ok(case) = build_case(&scenario, dt, f) else { continue };
                    let series = case.clean_series(&Tolerances::default()).unwrap();
                    assert!(series.values.iter().all(|v| *v >= 0.0), "{}", case.key());
                    if dt == DataType::CumulativeIncidence {
                        assert!(series.values.windows(2).all(|w| w[1] >= w[0]));
                    }
                }
            }
        }
    }

    #[test]
    fn truncated_scenario_matches_model_output_bitwise() {
        let s3 = Scenario::reference(3).unwrap();
        let case = build_case(&s3, DataType::Incidence, Frequency::Daily).unwrap();
        let tol = Tolerances::default();
        let clean = case.clean_series(&tol).unwrap();
        let model = case.model_series(&case.truth(), &tol).unwrap();
        assert_eq!(clean.values, model.values);
    }

    #[test]
    fn schedule_beyond_trajectory_is_range_error() {
        let s4 = Scenario::reference(4).unwrap();
        let traj = integrate(&s4.true_params, &s4.init, &daily_grid(20), false, &Tolerances::default()).unwrap();
        let err = observe(&traj, DataType::Prevalence, &SamplingSchedule::new(Frequency::Weekly, 50)).unwrap_err();
        assert!(matches!(err, ObservationError::OutOfRange { time, .. } if time == 21.0));
    }

    #[test]
    fn parse_names() {
        assert_eq!("cumulative".parse::<DataType>().unwrap(), DataType::CumulativeIncidence);
        assert_eq!("Weekly".parse::<Frequency>().unwrap(), Frequency::Weekly);
        assert!("hourly".parse::<Frequency>().is_err());
    }
}
