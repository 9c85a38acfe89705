//! Box-constrained Nelder–Mead.
//!
//! Bounds are enforced by the change of variables
//! `p = lb + (ub - lb) (sin u + 1) / 2`, so the simplex moves freely in `u`
//! and every evaluated point lies inside the box.

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::{Case, ObservationSeries};
use crate::seir::{ParamVector, Tolerances};

/// Objective value returned when the model cannot be integrated.
pub const PENALTY: f64 = 1e12;
/// Lower guard on model outputs in the relative-error denominator.
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("bounds must be finite with lower < upper (component {0})")]
    InvalidBounds(usize),
    #[error("component {index} = {value} lies outside [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<const N: usize> {
    pub lower: [f64; N],
    pub upper: [f64; N],
}

impl<const N: usize> Bounds<N> {
    pub fn new(lower: [f64; N], upper: [f64; N]) -> Result<Self, OptimError> {
        for k in 0..N {
            if !(lower[k].is_finite() && upper[k].is_finite() && lower[k] < upper[k]) {
                return Err(OptimError::InvalidBounds(k));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit() -> Self {
        Self {
            lower: [0.0; N],
            upper: [1.0; N],
        }
    }

    pub fn contains(&self, p: &[f64; N]) -> bool {
        (0..N).all(|k| p[k] >= self.lower[k] && p[k] <= self.upper[k])
    }

    pub fn transform(&self, u: &[f64; N]) -> [f64; N] {
        std::array::from_fn(|k| {
            let p = self.lower[k] + (self.upper[k] - self.lower[k]) * (u[k].sin() + 1.0) / 2.0;
            p.clamp(self.lower[k], self.upper[k])
        })
    }

    /// Principal-branch inverse of [`Bounds::transform`].
    pub fn inverse_transform(&self, p: &[f64; N]) -> Result<[f64; N], OptimError> {
        let mut u = [0.0; N];
        for k in 0..N {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            if !(p[k] >= lo && p[k] <= hi) {
                return Err(OptimError::OutOfBounds {
                    index: k,
                    value: p[k],
                    lower: lo,
                    upper: hi,
                });
            }
            let s = (2.0 * (p[k] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
            u[k] = s.asin();
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    /// Relative perturbation of each transformed start coordinate.
    pub initial_step: f64,
    /// Absolute perturbation used when a transformed start coordinate is 0.
    pub zero_step: f64,
    /// Iterations without improvement, once the simplex is narrower than
    /// `x_tol`, after which the search gives up on reaching `f_tol`.
    pub stall_iter: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            max_evals: 4000,
            f_tol: 1e-10,
            x_tol: 1e-8,
            initial_step: 0.05,
            zero_step: 0.00025,
            stall_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIterations,
    MaxEvaluations,
    /// The simplex collapsed below `x_tol` but its values stay more than
    /// `f_tol` apart, typically because of solver-level noise in `f`.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult<const N: usize> {
    pub best_params: [f64; N],
    pub best_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
}

#[derive(Clone, Copy)]
struct Vertex<const N: usize> {
    u: [f64; N],
    p: [f64; N],
    f: f64,
}

fn affine<const N: usize>(a: &[f64; N], b: &[f64; N], t: f64) -> [f64; N] {
    std::array::from_fn(|k| a[k] + t * (b[k] - a[k]))
}

/// Minimizes `f` over the box, starting at `start`.
///
/// The start point itself is vertex 0 of the initial simplex and is kept
/// verbatim (no round trip through the transform), so a start that is
/// already optimal is returned exactly. `f` must treat NaN as a bad value;
/// NaN results are replaced by `+inf`.
pub fn nelder_mead_bounded<const N: usize, F>(
    f: F,
    start: &[f64; N],
    bounds: &Bounds<N>,
    opts: &NelderMeadOptions,
) -> Result<OptimResult<N>, OptimError>
where
    F: Fn(&[f64; N]) -> f64,
{
    const RHO: f64 = 1.0;
    const CHI: f64 = 2.0;
    const PSI: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let evaluations = Cell::new(0usize);
    let eval = |u: [f64; N], p: [f64; N]| -> Vertex<N> {
        debug_assert!(bounds.contains(&p));
        evaluations.set(evaluations.get() + 1);
        let v = f(&p);
        Vertex {
            u,
            p,
            f: if v.is_nan() { f64::INFINITY } else { v },
        }
    };

    let u0 = bounds.inverse_transform(start)?;
    let mut simplex: Vec<Vertex<N>> = Vec::with_capacity(N + 1);
    simplex.push(eval(u0, *start));
    for k in 0..N {
        let mut u = u0;
        u[k] = if u[k] != 0.0 {
            (1.0 + opts.initial_step) * u[k]
        } else {
            opts.zero_step
        };
        let p = bounds.transform(&u);
        simplex.push(eval(u, p));
    }
    let order = |s: &mut Vec<Vertex<N>>| s.sort_by(|a, b| a.f.total_cmp(&b.f));
    order(&mut simplex);

    let mut iterations = 0usize;
    let mut last_improvement = 0usize;
    let mut best_f = simplex[0].f;
    let termination = loop {
        let first = simplex[0];
        let spread_f = simplex[1..].iter().map(|v| (v.f - first.f).abs()).fold(0.0, f64::max);
        let spread_x = simplex[1..]
            .iter()
            .flat_map(|v| (0..N).map(move |k| (v.u[k] - first.u[k]).abs()))
            .fold(0.0, f64::max);
        if first.f < best_f {
            best_f = first.f;
            last_improvement = iterations;
        }
        if spread_x <= opts.x_tol {
            if spread_f <= opts.f_tol {
                break Termination::Converged;
            }
            if iterations - last_improvement >= opts.stall_iter {
                break Termination::Stalled;
            }
        }
        if iterations >= opts.max_iter {
            break Termination::MaxIterations;
        }
        if evaluations.get() >= opts.max_evals {
            break Termination::MaxEvaluations;
        }
        iterations += 1;

        let worst = simplex[N];
        let mut centroid = [0.0; N];
        for v in &simplex[..N] {
            for k in 0..N {
                centroid[k] += v.u[k];
            }
        }
        for c in &mut centroid {
            *c /= N as f64;
        }
        let at = |t: f64| affine(&centroid, &worst.u, -t);

        let ur = at(RHO);
        let r = eval(ur, bounds.transform(&ur));
        let mut shrink = false;
        if r.f < simplex[0].f {
            let ue = at(RHO * CHI);
            let e = eval(ue, bounds.transform(&ue));
            simplex[N] = if e.f < r.f { e } else { r };
        } else if r.f < simplex[N - 1].f {
            simplex[N] = r;
        } else if r.f < worst.f {
            let uc = at(PSI * RHO);
            let c = eval(uc, bounds.transform(&uc));
            if c.f <= r.f {
                simplex[N] = c;
            } else {
                shrink = true;
            }
        } else {
            let ucc = at(-PSI);
            let cc = eval(ucc, bounds.transform(&ucc));
            if cc.f < worst.f {
                simplex[N] = cc;
            } else {
                shrink = true;
            }
        }
        if shrink {
            let best = simplex[0].u;
            for v in simplex.iter_mut().skip(1) {
                let u = affine(&best, &v.u, SIGMA);
                *v = eval(u, bounds.transform(&u));
            }
        }
        order(&mut simplex);
    };

    let best = simplex[0];
    Ok(OptimResult {
        best_params: best.p,
        best_value: best.f,
        iterations,
        evaluations: evaluations.get(),
        converged: termination == Termination::Converged,
        termination,
    })
}

/// Relative least-squares misfit of one observed series:
/// `sum_i (y_i - g_i)^2 / max(g_i, floor)^2`, where `g` is the model output.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub case: &'a Case,
    pub observed: &'a ObservationSeries,
    pub floor: f64,
    pub tol: Tolerances,
}

impl<'a> Objective<'a> {
    pub fn new(case: &'a Case, observed: &'a ObservationSeries, tol: Tolerances) -> Self {
        Self {
            case,
            observed,
            floor: DEFAULT_FLOOR,
            tol,
        }
    }

    /// Returns [`PENALTY`] when the model cannot be integrated at `params`.
    pub fn eval(&self, params: &ParamVector) -> f64 {
        match self.case.model_series(params, &self.tol) {
            Ok(model) => self.misfit(&model.values),
            Err(err) => {
                log::warn!("{}: integration failed at {:?}: {err}", self.case.key(), params);
                PENALTY
            }
        }
    }

    pub fn misfit(&self, model: &[f64]) -> f64 {
        self.observed
            .values
            .iter()
            .zip(model)
            .map(|(y, g)| {
                let d = g.max(self.floor);
                (y - g) * (y - g) / (d * d)
            })
            .sum()
    }

    /// Fits the observed series starting from `start` in the unit box.
    pub fn fit(&self, start: &ParamVector, opts: &NelderMeadOptions) -> Result<OptimResult<3>, OptimError> {
        nelder_mead_bounded(
            |p: &[f64; 3]| self.eval(&ParamVector::from_array(*p)),
            &start.to_array(),
            &Bounds::unit(),
            opts,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{build_case, DataType, Frequency, Scenario};
    use crate::synth::{generate_replicates, CumulativeNoise, NoiseSpec};
    use proptest::prelude::*;
    use std::cell::RefCell;

    #[test]
    fn quadratic_bowl() {
        let f = |p: &[f64; 3]| p.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>();
        let r = nelder_mead_bounded(f, &[0.1; 3], &Bounds::unit(), &NelderMeadOptions::default()).unwrap();
        assert!(r.converged);
        for x in r.best_params {
            assert!((x - 0.5).abs() < 1e-6, "{:?}", r.best_params);
        }
    }

    #[test]
    fn rosenbrock_in_box() {
        let f = |p: &[f64; 2]| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2);
        let b = Bounds::new([0.0; 2], [2.0; 2]).unwrap();
        let opts = NelderMeadOptions {
            f_tol: 1e-14,
            x_tol: 1e-10,
            ..Default::default()
        };
        let r = nelder_mead_bounded(f, &[0.5, 0.5], &b, &opts).unwrap();
        assert!((r.best_params[0] - 1.0).abs() < 1e-4 && (r.best_params[1] - 1.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn transform_round_trip_and_midpoint() {
        let b = Bounds::<3>::unit();
        let p = [1e-4, 0.2, 0.03];
        let back = b.transform(&b.inverse_transform(&p).unwrap());
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() <= 1e-12);
        }
        assert_eq!(b.transform(&[0.0; 3]), [0.5; 3]);
        assert!(b.inverse_transform(&[1.5, 0.2, 0.03]).is_err());
        assert!(Bounds::new([1.0], [1.0]).is_err());
    }

    proptest! {
        #[test]
        fn transform_stays_in_bounds(u in prop::array::uniform3(-1e3f64..1e3)) {
            let b = Bounds::new([-2.0, 0.0, 1e-6], [3.0, 1.0, 2e-6]).unwrap();
            prop_assert!(b.contains(&b.transform(&u)));
        }
    }

    #[test]
    fn best_value_never_increases() {
        let trace = RefCell::new(Vec::new());
        let f = |p: &[f64; 2]| {
            let v = (p[0] - 0.3).powi(2) + 3.0 * (p[1] - 0.7).powi(2) + (p[0] * p[1]).sin();
            let mut t = trace.borrow_mut();
            let best = t.last().copied().unwrap_or(f64::INFINITY);
            t.push(f64::min(best, v));
            v
        };
        let r = nelder_mead_bounded(f, &[0.9, 0.1], &Bounds::unit(), &NelderMeadOptions::default()).unwrap();
        let t = trace.into_inner();
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*t.last().unwrap(), r.best_value);
    }

    #[test]
    fn max_iter_is_not_an_error() {
        let f = |p: &[f64; 2]| (p[0] - 0.2).powi(2) + (p[1] - 0.9).powi(2);
        let opts = NelderMeadOptions {
            max_iter: 3,
            ..Default::default()
        };
        let r = nelder_mead_bounded(f, &[0.5, 0.5], &Bounds::unit(), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.termination, Termination::MaxIterations);
        assert_eq!(r.iterations, 3);
    }

    fn s1_prevalence_weekly() -> Case {
        build_case(&Scenario::reference(1).unwrap(), DataType::Prevalence, Frequency::Weekly).unwrap()
    }

    #[test]
    fn doubled_data_gives_point_count() {
        let case = s1_prevalence_weekly();
        let tol = Tolerances::default();
        let mut y = case.clean_series(&tol).unwrap();
        y.values.iter_mut().for_each(|v| *v *= 2.0);
        let obj = Objective::new(&case, &y, tol);
        let v = obj.eval(&case.truth());
        assert!((v - y.len() as f64).abs() < 1e-9, "{v}");
    }

    #[test]
    fn clean_data_fit_returns_truth_exactly() {
        let case = s1_prevalence_weekly();
        let tol = Tolerances::default();
        let y = case.clean_series(&tol).unwrap();
        let obj = Objective::new(&case, &y, tol);
        let r = obj.fit(&case.truth(), &NelderMeadOptions::default()).unwrap();
        assert_eq!(r.best_value, 0.0);
        assert_eq!(r.best_params, case.truth().to_array());
    }

    #[test]
    fn objective_at_truth_averages_n_sigma_squared() {
        let case = s1_prevalence_weekly();
        let tol = Tolerances::default();
        let clean = case.clean_series(&tol).unwrap();
        let sigma = 0.3;
        let set = generate_replicates(&case, &clean, NoiseSpec::new(sigma).unwrap(), 400, 9, CumulativeNoise::default()).unwrap();
        let vals: Vec<f64> = set
            .replicates
            .iter()
            .map(|y| Objective::new(&case, y, tol).misfit(&clean.values))
            .collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        let expect = clean.len() as f64 * sigma * sigma;
        assert!((mean - expect).abs() < 3.0 * sd / m.sqrt(), "mean {mean} expect {expect}");
    }
}
