//! Noisy replicate datasets under the multiplicative Gaussian error model
//! `y_i = g_i (1 + eps_i)`, `eps_i ~ N(0, sigma)`.
//!
//! Replicate `j` of a case is drawn from its own ChaCha stream, keyed by the
//! base seed, the source scenario, the observable, the sampling frequency
//! and `j`. The standard-normal draws do not depend on `sigma`, and a
//! truncated scenario (3 or 4) shares its source scenario's key, so its
//! replicates are prefixes of the source replicates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::{Case, CaseKey, DataType, ObservationSeries};

/// Default noise levels, as fractions.
pub const DEFAULT_SIGMAS: [f64; 6] = [0.0, 0.01, 0.05, 0.10, 0.20, 0.30];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("noise level must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("noise can only be added to a clean series (noise level {0})")]
    NotClean(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self, SynthError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(SynthError::InvalidSigma(sigma));
        }
        Ok(Self { sigma })
    }
}

/// How noisy cumulative-incidence data are produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CumulativeNoise {
    /// Perturb the cumulative series itself, like every other observable.
    #[default]
    Multiplicative,
    /// Perturb the per-interval increments and accumulate them.
    AccumulatedIncidence,
}

impl CumulativeNoise {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Multiplicative => "multiplicative",
            Self::AccumulatedIncidence => "accumulated-incidence",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent random stream for replicate `replicate` of `case`.
pub fn replicate_stream(seed: u64, case: &CaseKey, source_scenario: u8, replicate: usize) -> ChaCha8Rng {
    let dt = case.data_type as u64;
    let freq = case.frequency as u64;
    let key = splitmix64(seed ^ splitmix64((u64::from(source_scenario) << 16) | (dt << 8) | freq));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(replicate as u64);
    rng
}

/// Multiplies every clean value by an independent `1 + sigma * z` factor.
///
/// Negative results are kept: the normal error model allows them.
pub fn add_noise<R: Rng + ?Sized>(
    clean: &ObservationSeries,
    noise: NoiseSpec,
    rng: &mut R,
) -> Result<ObservationSeries, SynthError> {
    if clean.noise_level != 0.0 {
        return Err(SynthError::NotClean(clean.noise_level));
    }
    let values = clean
        .values
        .iter()
        .map(|g| {
            let z: f64 = rng.sample(StandardNormal);
            g * (1.0 + noise.sigma * z)
        })
        .collect();
    Ok(ObservationSeries {
        values,
        noise_level: noise.sigma,
        ..clean.clone()
    })
}

/// Noisy cumulative series built by perturbing the increments of `clean`
/// (starting from `initial`) and summing them back up.
pub fn add_accumulated_noise<R: Rng + ?Sized>(
    clean: &ObservationSeries,
    initial: f64,
    noise: NoiseSpec,
    rng: &mut R,
) -> Result<ObservationSeries, SynthError> {
    if clean.noise_level != 0.0 {
        return Err(SynthError::NotClean(clean.noise_level));
    }
    let mut prev = initial;
    let mut total = initial;
    let mut values = Vec::with_capacity(clean.len());
    for &c in &clean.values {
        let z: f64 = rng.sample(StandardNormal);
        total += (c - prev) * (1.0 + noise.sigma * z);
        prev = c;
        values.push(total);
    }
    Ok(ObservationSeries {
        values,
        noise_level: noise.sigma,
        ..clean.clone()
    })
}

/// `m` noisy copies of one clean series.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSet {
    pub case: CaseKey,
    pub sigma: f64,
    pub seed: u64,
    pub replicates: Vec<ObservationSeries>,
}

/// Regenerates replicate `j` alone.
pub fn generate_replicate(
    case: &Case,
    clean: &ObservationSeries,
    noise: NoiseSpec,
    seed: u64,
    j: usize,
    mode: CumulativeNoise,
) -> Result<ObservationSeries, SynthError> {
    let mut rng = replicate_stream(seed, &case.key(), case.scenario.source_id(), j);
    match (case.data_type, mode) {
        (DataType::CumulativeIncidence, CumulativeNoise::AccumulatedIncidence) => {
            add_accumulated_noise(clean, case.scenario.init.c, noise, &mut rng)
        }
        _ => add_noise(clean, noise, &mut rng),
    }
}

pub fn generate_replicates(
    case: &Case,
    clean: &ObservationSeries,
    noise: NoiseSpec,
    m: usize,
    seed: u64,
    mode: CumulativeNoise,
) -> Result<ReplicateSet, SynthError> {
    if m == 0 {
        return Err(SynthError::NoReplicates);
    }
    let replicates = (0..m)
        .map(|j| generate_replicate(case, clean, noise, seed, j, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReplicateSet {
        case: case.key(),
        sigma: noise.sigma,
        seed,
        replicates,
    })
}

impl ReplicateSet {
    /// One row per (replicate, time).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "time", "value"])?;
        for (j, series) in self.replicates.iter().enumerate() {
            for (t, v) in series.times().iter().zip(&series.values) {
                w.write_record([j.to_string(), t.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{build_case, Frequency, Scenario};
    use crate::seir::Tolerances;

    fn case(id: u8, dt: DataType, f: Frequency) -> (Case, ObservationSeries) {
        let c = build_case(&Scenario::reference(id).unwrap(), dt, f).unwrap();
        let clean = c.clean_series(&Tolerances::default()).unwrap();
        (c, clean)
    }

    #[test]
    fn zero_sigma_is_identity() {
        let (c, clean) = case(1, DataType::Prevalence, Frequency::Weekly);
        let set = generate_replicates(&c, &clean, NoiseSpec::new(0.0).unwrap(), 50, 7, CumulativeNoise::default()).unwrap();
        assert!(set.replicates.iter().all(|r| r.values == clean.values));
    }

    #[test]
    fn ratio_moments_match_sigma() {
        let (_, clean) = case(1, DataType::Prevalence, Frequency::Daily);
        let one = ObservationSeries {
            values: vec![clean.values[100]; 10_000],
            ..clean.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = add_noise(&one, NoiseSpec::new(0.3).unwrap(), &mut rng).unwrap();
        let ratios: Vec<f64> = noisy.values.iter().map(|y| y / one.values[0]).collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 0.3 * 3.0 / n.sqrt(), "mean {mean}");
        assert!((sd - 0.3).abs() < 0.05 * 0.3, "sd {sd}");
        // Lag-1 autocorrelation of the draws.
        let z: Vec<f64> = ratios.iter().map(|r| r - mean).collect();
        let rho = z.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / z.iter().map(|v| v * v).sum::<f64>();
        assert!(rho.abs() < 0.05, "rho {rho}");
        assert!(noisy.values.iter().any(|v| *v < 0.0) || ratios.iter().all(|r| *r > 0.0));
    }

    #[test]
    fn replicates_are_seeded_and_isolated() {
        let (c, clean) = case(2, DataType::Incidence, Frequency::Daily);
        let noise = NoiseSpec::new(0.1).unwrap();
        let a = generate_replicates(&c, &clean, noise, 20, 42, CumulativeNoise::default()).unwrap();
        let b = generate_replicates(&c, &clean, noise, 20, 42, CumulativeNoise::default()).unwrap();
        assert_eq!(a, b);
        let other = generate_replicates(&c, &clean, noise, 20, 43, CumulativeNoise::default()).unwrap();
        assert_ne!(a.replicates[0].values[0], other.replicates[0].values[0]);
        let lone = generate_replicate(&c, &clean, noise, 42, 13, CumulativeNoise::default()).unwrap();
        assert_eq!(lone, a.replicates[13]);
        assert_ne!(a.replicates[0].values, a.replicates[1].values);
    }

    #[test]
    fn truncated_scenario_replicates_are_prefixes() {
        let (c1, clean1) = case(1, DataType::Prevalence, Frequency::Daily);
        let (c3, clean3) = case(3, DataType::Prevalence, Frequency::Daily);
        let noise = NoiseSpec::new(0.2).unwrap();
        let r1 = generate_replicate(&c1, &clean1, noise, 5, 3, CumulativeNoise::default()).unwrap();
        let r3 = generate_replicate(&c3, &clean3, noise, 5, 3, CumulativeNoise::default()).unwrap();
        assert_eq!(&r1.values[..100], &r3.values[..]);
    }

    #[test]
    fn accumulated_noise_keeps_endpoints_consistent() {
        let (c, clean) = case(1, DataType::CumulativeIncidence, Frequency::Weekly);
        let zero = generate_replicate(&c, &clean, NoiseSpec::new(0.0).unwrap(), 1, 0, CumulativeNoise::AccumulatedIncidence).unwrap();
        for (a, b) in zero.values.iter().zip(&clean.values) {
            assert!((a - b).abs() <= 1e-9 * b);
        }
        let noisy = generate_replicate(&c, &clean, NoiseSpec::new(0.3).unwrap(), 1, 0, CumulativeNoise::AccumulatedIncidence).unwrap();
        // Late increments are tiny, so late noisy values stay near the clean curve.
        let last = clean.len() - 1;
        assert!((noisy.values[last] - noisy.values[last - 1]).abs() < 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(NoiseSpec::new(-0.1).is_err());
        assert!(NoiseSpec::new(f64::NAN).is_err());
        let (c, clean) = case(1, DataType::Prevalence, Frequency::Monthly);
        assert!(matches!(
            generate_replicates(&c, &clean, NoiseSpec::new(0.1).unwrap(), 0, 1, CumulativeNoise::default()),
            Err(SynthError::NoReplicates)
        ));
    }

    #[test]
    fn csv_export_has_row_per_point() {
        let (c, clean) = case(3, DataType::Prevalence, Frequency::Monthly);
        let set = generate_replicates(&c, &clean, NoiseSpec::new(0.1).unwrap(), 4, 1, CumulativeNoise::default()).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 3);
        assert!(text.starts_with("replicate,time,value\n0,30,"));
    }
}
