use proptest::prelude::*;

use seir_ident::cm::{self, WeightMode};
use seir_ident::config::ExperimentConfig;
use seir_ident::observation::{build_case, observe, Case, DataType, Frequency, SamplingSchedule, Scenario};
use seir_ident::seir::{daily_grid, integrate, ParamVector, StateVector};
use seir_ident::synth::{generate_replicate, CumulativeNoise, NoiseSpec};
use seir_ident::Tolerances;

fn all_cases() -> Vec<Case> {
    ExperimentConfig::default().build_cases().unwrap()
}

#[test]
fn prevalence_peaks_on_reference_days() {
    for s in Scenario::all_reference() {
        let traj = s.source_trajectory(&Tolerances::default()).unwrap();
        let peak = (0..traj.states.len()).max_by(|&a, &b| traj.states[a].i.total_cmp(&traj.states[b].i)).unwrap();
        // Day numbers count from 1; grid index 0 is day 1.
        assert!((peak as i64 + 1 - i64::from(s.peak_day)).abs() <= 1, "S{}: index {peak}", s.id);
    }
}

#[test]
fn halving_tolerances_barely_moves_prevalence() {
    let tol = Tolerances::default();
    for s in Scenario::all_reference() {
        let grid = daily_grid(s.span);
        let a = integrate(&s.true_params, &s.init, &grid, false, &tol).unwrap();
        let b = integrate(&s.true_params, &s.init, &grid, false, &tol.scaled(0.5)).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x.i - y.i).abs() < 1e-6 * s.population(), "S{}", s.id);
        }
    }
}

#[test]
fn sensitivity_rows_match_finite_differences_on_every_case() {
    let tol = Tolerances::new(1e-12, 1e-14);
    for case in all_cases() {
        let p = case.truth();
        let f = cm::sensitivity_matrix(&case, &p, &tol).unwrap();
        for j in 0..3 {
            let h = 1e-4 * p.to_array()[j];
            let shifted = |d: f64| {
                let mut a = p.to_array();
                a[j] += d;
                case.model_series(&ParamVector::from_array(a), &tol).unwrap().values
            };
            let (up, dn) = (shifted(h), shifted(-h));
            let col_max = f.rows.iter().fold(0.0f64, |m, r| m.max(r[j].abs()));
            for (i, r) in f.rows.iter().enumerate() {
                if r[j].abs() > 1e-8 * col_max {
                    let fd = (up[i] - dn[i]) / (2.0 * h);
                    // Incidence rows are differences, so allow a floor scaled to the column.
                    assert!((fd - r[j]).abs() < 1e-4 * r[j].abs() + 1e-8 * col_max, "{} row {i} param {j}: {fd} vs {} (column max {col_max})", case.key(), r[j]);
                }
            }
        }
    }
}

#[test]
fn weekly_incidence_is_a_sum_of_daily_incidence() {
    for s in Scenario::all_reference() {
        let traj = integrate(&s.true_params, &s.init, &daily_grid(s.span), false, &Tolerances::default()).unwrap();
        let daily = observe(&traj, DataType::Incidence, &SamplingSchedule::new(Frequency::Daily, s.span)).unwrap();
        let weekly = observe(&traj, DataType::Incidence, &SamplingSchedule::new(Frequency::Weekly, s.span)).unwrap();
        for (w, v) in weekly.values.iter().enumerate() {
            let sum: f64 = daily.values[7 * w..7 * w + 7].iter().sum();
            assert!((sum - v).abs() <= 1e-9 * v.abs(), "S{} week {w}", s.id);
        }
    }
}

#[test]
fn information_inverse_is_symmetric_with_bounded_correlations() {
    let tol = Tolerances::default();
    for case in all_cases() {
        for mode in [WeightMode::InverseSquare, WeightMode::Literal] {
            let f = cm::sensitivity_matrix(&case, &case.truth(), &tol).unwrap();
            let Ok(fi) = cm::fisher_inverse(&f, &f.outputs, mode) else {
                continue;
            };
            for a in 0..3 {
                for b in 0..3 {
                    let scale = (fi.im[a][a] * fi.im[b][b]).sqrt();
                    assert!((fi.im[a][b] - fi.im[b][a]).abs() <= 1e-12 * scale, "{}", case.key());
                }
            }
            let chi = cm::correlations(&fi).unwrap();
            assert!(chi.0.iter().all(|c| (-1.0..=1.0).contains(c)), "{}: {:?}", case.key(), chi.0);
        }
    }
}

#[test]
fn truncated_scenarios_reuse_the_source_noise() {
    let tol = Tolerances::default();
    let noise = NoiseSpec::new(0.2).unwrap();
    for (short, long) in [(3, 1), (4, 2)] {
        for f in Frequency::ALL {
            let Ok(a) = build_case(&Scenario::reference(short).unwrap(), DataType::Prevalence, f) else {
                continue;
            };
            let b = build_case(&Scenario::reference(long).unwrap(), DataType::Prevalence, f).unwrap();
            let (ca, cb) = (a.clean_series(&tol).unwrap(), b.clean_series(&tol).unwrap());
            for j in [0, 7, 499] {
                let ya = generate_replicate(&a, &ca, noise, 11, j, CumulativeNoise::Multiplicative).unwrap();
                let yb = generate_replicate(&b, &cb, noise, 11, j, CumulativeNoise::Multiplicative).unwrap();
                assert_eq!(ya.values[..], yb.values[..ya.len()], "S{short} {f} replicate {j}");
            }
        }
    }
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!config.build_cases().unwrap().is_empty());
        n += 1;
    }
    assert!(n >= 2);
}

fn params() -> impl Strategy<Value = ParamVector> {
    (1e-5f64..2e-3, 0.02f64..1.0, 0.01f64..0.5).prop_map(|(b, g, a)| ParamVector::new(b, g, a))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn population_is_conserved_and_states_stay_nonnegative(p in params(), i0 in 1.0f64..50.0) {
        let init = StateVector::new(1000.0 - i0, 0.0, i0, 0.0, i0);
        let traj = integrate(&p, &init, &daily_grid(120), false, &Tolerances::default()).unwrap();
        for x in &traj.states {
            prop_assert!((x.population() - 1000.0).abs() <= 1e-6 * 1000.0);
            prop_assert!(x.to_array().iter().all(|v| *v > -1e-6));
            prop_assert!((x.c + x.s - 1000.0).abs() <= 1e-6 * 1000.0);
        }
    }

    #[test]
    fn correlations_ignore_weight_scale(p in params(), scale in 1e-6f64..1e6) {
        let case = build_case(&Scenario::reference(1).unwrap(), DataType::Incidence, Frequency::Weekly).unwrap();
        let f = cm::sensitivity_matrix(&case, &p, &Tolerances::default()).unwrap();
        let w: Vec<f64> = f.outputs.values.iter().map(|g| WeightMode::InverseSquare.weight(*g)).collect();
        let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
        if let (Ok(a), Ok(b)) = (
            cm::fisher_inverse_weighted(&f.rows, &w, WeightMode::InverseSquare),
            cm::fisher_inverse_weighted(&f.rows, &ws, WeightMode::InverseSquare),
        ) {
            let (a, b) = (cm::correlations(&a).unwrap(), cm::correlations(&b).unwrap());
            for k in 0..3 {
                prop_assert!((a.0[k] - b.0[k]).abs() < 1e-9);
            }
        }
    }
}
