//! Browser bindings for the `www/` demo page.
//!
//! Every exported function has a plain-Rust `*_impl` twin so the logic can
//! be tested natively. Results are flat `Float64Array`s; the layouts are
//! documented on each function.

use seir_ident::cm::{self, WeightMode, DEFAULT_THRESHOLD};
use seir_ident::mc::{self, McOptions};
use seir_ident::observation::{build_case, Case, DataType, Frequency, Scenario};
use seir_ident::seir::{daily_grid, integrate, ParamVector};
use seir_ident::Tolerances;
use wasm_bindgen::prelude::*;

/// Largest replicate count `mc_preview` accepts; fits run on the UI thread.
pub const MAX_PREVIEW_REPLICATES: usize = 200;

fn scenario_with(id: u8, beta: f64, gamma: f64, alpha: f64) -> Result<Scenario, String> {
    let mut s = Scenario::reference(id).map_err(|e| e.to_string())?;
    let p = ParamVector::new(beta, gamma, alpha);
    if !p.is_finite() || p.to_array().iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
        return Err("rates must lie in (0, 1]".into());
    }
    s.true_params = p;
    Ok(s)
}

fn case_for(scenario: u8, data_type: &str, freq: &str, p: [f64; 3]) -> Result<Case, String> {
    let s = scenario_with(scenario, p[0], p[1], p[2])?;
    let dt = data_type.parse::<DataType>().map_err(|e| format!("{e}"))?;
    let f = freq.parse::<Frequency>().map_err(|e| format!("{e}"))?;
    build_case(&s, dt, f).map_err(|e| e.to_string())
}

/// Rows of `[t, S, E, I, R, C]` for days `0..=span`.
pub fn simulate_impl(scenario: u8, beta: f64, gamma: f64, alpha: f64) -> Result<Vec<f64>, String> {
    let s = scenario_with(scenario, beta, gamma, alpha)?;
    let traj = integrate(&s.true_params, &s.init, &daily_grid(s.span), false, &Tolerances::default())
        .map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(traj.times.len() * 6);
    for (t, x) in traj.times.iter().zip(&traj.states) {
        out.push(*t);
        out.extend_from_slice(&x.to_array());
    }
    Ok(out)
}

/// `[beta:gamma, beta:alpha, gamma:alpha, identifiable (0 or 1), scaled condition number]`.
pub fn cm_correlations_impl(
    scenario: u8,
    data_type: &str,
    freq: &str,
    beta: f64,
    gamma: f64,
    alpha: f64,
    literal_weights: bool,
) -> Result<Vec<f64>, String> {
    let case = case_for(scenario, data_type, freq, [beta, gamma, alpha])?;
    let mode = if literal_weights { WeightMode::Literal } else { WeightMode::InverseSquare };
    let r = cm::assess(&case, &case.truth(), &Tolerances::default(), mode, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
    let mut out = r.verdict.correlations.0.to_vec();
    out.push(if r.verdict.identifiable { 1.0 } else { 0.0 });
    out.push(r.fisher.scaled_condition);
    Ok(out)
}

/// `[ARE beta, ARE gamma, ARE alpha]` in percent, followed by the relative
/// errors `(beta, gamma, alpha)` of each retained estimate.
pub fn mc_preview_impl(
    scenario: u8,
    data_type: &str,
    freq: &str,
    sigma: f64,
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>, String> {
    if replicates == 0 || replicates > MAX_PREVIEW_REPLICATES {
        return Err(format!("replicates must lie in 1..={MAX_PREVIEW_REPLICATES}"));
    }
    let reference = Scenario::reference(scenario).map_err(|e| e.to_string())?;
    let case = case_for(scenario, data_type, freq, reference.true_params.to_array())?;
    let opts = McOptions {
        sigmas: vec![sigma],
        replicates,
        seed,
        ..Default::default()
    };
    let run = mc::run_mc(&case, &opts).map_err(|e| e.to_string())?;
    let cloud = &run.clouds[0];
    let mut out = run.are.rows[0].are.to_vec();
    for e in mc::normalized_errors(&cloud.params(), &cloud.truth) {
        out.extend_from_slice(&e);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn simulate(scenario: u8, beta: f64, gamma: f64, alpha: f64) -> Result<Vec<f64>, JsValue> {
    simulate_impl(scenario, beta, gamma, alpha).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cm_correlations(
    scenario: u8,
    data_type: &str,
    freq: &str,
    beta: f64,
    gamma: f64,
    alpha: f64,
    literal_weights: bool,
) -> Result<Vec<f64>, JsValue> {
    cm_correlations_impl(scenario, data_type, freq, beta, gamma, alpha, literal_weights).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn mc_preview(scenario: u8, data_type: &str, freq: &str, sigma: f64, replicates: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    mc_preview_impl(scenario, data_type, freq, sigma, replicates, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_layout() {
        let v = simulate_impl(2, 1e-3, 0.2, 0.03).unwrap();
        assert_eq!(v.len(), 51 * 6);
        assert_eq!(&v[..6], &[0.0, 990.0, 0.0, 10.0, 0.0, 10.0]);
        assert!(simulate_impl(2, 0.0, 0.2, 0.03).is_err());
        assert!(simulate_impl(7, 1e-3, 0.2, 0.03).is_err());
    }

    #[test]
    fn cm_matches_core() {
        let v = cm_correlations_impl(1, "incidence", "daily", 1e-4, 0.2, 0.03, false).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v[3], 1.0);
        assert!((v[0] + 0.84).abs() < 0.02);
        assert!(cm_correlations_impl(4, "incidence", "weekly", 1e-3, 0.2, 0.03, false).is_err());
        assert!(cm_correlations_impl(1, "hourly", "daily", 1e-4, 0.2, 0.03, false).is_err());
    }

    #[test]
    fn mc_preview_layout() {
        let v = mc_preview_impl(3, "prevalence", "monthly", 0.0, 5, 1).unwrap();
        assert_eq!(v.len(), 3 + 5 * 3);
        assert!(v.iter().all(|x| *x == 0.0));
        assert!(mc_preview_impl(3, "prevalence", "monthly", 0.1, 0, 1).is_err());
    }
}
