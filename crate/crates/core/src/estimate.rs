//! Benchmark estimators for GBM from the exact log-normal likelihood.

use std::sync::atomic::{AtomicU64, Ordering};

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;

use crate::error::{Error, Result};
use crate::model::{gbm_exact_transition_logdensity, GbmParams, PriorSpec};
use crate::scheme::Observation;

/// Cost-function evaluation budget of the simplex search.
pub const MAX_EVALUATIONS: u64 = 10_000;

fn log_increments(obs: &[Observation]) -> Result<(Vec<f64>, f64)> {
    if obs.len() < 3 {
        return Err(Error::Parameter(format!("need at least 3 observations, got {}", obs.len())));
    }
    if let Some(o) = obs.iter().find(|o| !(o.value > 0.0)) {
        return Err(Error::StateSpace { x: o.value, lower: 0.0 });
    }
    let dt = obs[1].time - obs[0].time;
    for w in obs.windows(2) {
        let gap = w[1].time - w[0].time;
        if !(gap > 0.0) || (gap - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(Error::Grid("observations must be equidistant".into()));
        }
    }
    Ok((obs.windows(2).map(|w| (w[1].value / w[0].value).ln()).collect(), dt))
}

/// Exact GBM log-likelihood of the observations for `(α, σ²)`.
pub fn gbm_exact_loglik(obs: &[Observation], alpha: f64, sigma2: f64) -> f64 {
    if !(sigma2 > 0.0) {
        return f64::NEG_INFINITY;
    }
    let p = GbmParams { alpha, sigma: sigma2.sqrt() };
    obs.windows(2)
        .map(|w| {
            gbm_exact_transition_logdensity(w[0].value, w[1].value, w[1].time - w[0].time, &p)
                .unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

/// Closed-form maximum-likelihood `(α̂, σ̂²)`: with log-increments `r_i` over
/// gaps `Δτ`, `σ̂² = Σ(r_i − r̄)²/(MΔτ)` and `α̂ = r̄/Δτ + σ̂²/2`.
pub fn ml_estimate_gbm(obs: &[Observation]) -> Result<(f64, f64)> {
    let (r, dt) = log_increments(obs)?;
    let m = r.len() as f64;
    let mean = r.iter().sum::<f64>() / m;
    let sigma2 = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m * dt);
    Ok((mean / dt + 0.5 * sigma2, sigma2))
}

struct Objective<'a, F: Fn(&[f64]) -> f64> {
    f: F,
    evaluations: &'a AtomicU64,
}

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let v = (self.f)(p);
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    }
}

/// Nelder–Mead minimisation of `f` from `start` with initial simplex steps
/// `steps`. Restarts once from the best vertex to polish the optimum.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, start: &[f64], steps: &[f64], sd_tolerance: f64) -> Result<(Vec<f64>, f64)> {
    let evaluations = AtomicU64::new(0);
    let objective = Objective { f, evaluations: &evaluations };
    let mut best = start.to_vec();
    let mut best_cost = f64::INFINITY;
    let mut step_scale = 1.0;
    for _round in 0..2 {
        let mut simplex = vec![best.clone()];
        for (i, s) in steps.iter().enumerate() {
            let mut v = best.clone();
            v[i] += s * step_scale;
            simplex.push(v);
        }
        let remaining = MAX_EVALUATIONS.saturating_sub(evaluations.load(Ordering::Relaxed));
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(sd_tolerance)
            .map_err(|e| Error::Config(e.to_string()))?;
        let res = Executor::new(&objective, solver)
            .configure(|s| s.max_iters(remaining))
            .run()
            .map_err(|e| Error::Config(e.to_string()))?;
        let state = res.state();
        if let Some(p) = state.get_best_param() {
            if state.get_best_cost() <= best_cost {
                best = p.clone();
                best_cost = state.get_best_cost();
            }
        }
        let converged =
            matches!(state.get_termination_status(), TerminationStatus::Terminated(TerminationReason::SolverConverged));
        let used = evaluations.load(Ordering::Relaxed);
        if !converged || used > MAX_EVALUATIONS {
            return Err(Error::NoConvergence { evaluations: used, best });
        }
        step_scale = 1e-3;
    }
    Ok((best, best_cost))
}

impl<F: Fn(&[f64]) -> f64> CostFunction for &Objective<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        (*self).cost(p)
    }
}

/// Maximum a posteriori `(α, σ²)` under the exact likelihood, searched over
/// `(α, log σ²)` from the ML estimate.
pub fn map_estimate_gbm(obs: &[Observation], prior: &PriorSpec) -> Result<(f64, f64)> {
    if prior.len() != 2 {
        return Err(Error::Config(format!("GBM needs 2 priors, got {}", prior.len())));
    }
    let (alpha0, sigma2_0) = ml_estimate_gbm(obs)?;
    let start = [alpha0, sigma2_0.max(1e-8).ln()];
    let objective = |z: &[f64]| {
        let s2 = z[1].exp();
        -(gbm_exact_loglik(obs, z[0], s2) + prior.logdensity(&[z[0], s2]))
    };
    let (z, _) = nelder_mead(objective, &start, &[0.5, 0.2], 1e-13)?;
    Ok((z[0], z[1].exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn obs(values: &[f64], dt: f64) -> Vec<Observation> {
        values.iter().enumerate().map(|(i, &v)| Observation { time: i as f64 * dt, value: v }).collect()
    }

    #[test]
    fn noiseless_data() {
        let dt = 0.1;
        let v: Vec<f64> = (0..10).map(|i| 100.0 * (1.3 * i as f64 * dt).exp()).collect();
        let (a, s2) = ml_estimate_gbm(&obs(&v, dt)).unwrap();
        assert_relative_eq!(a, 1.3, max_relative = 1e-12);
        assert!(s2.abs() < 1e-20);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ml_estimate_gbm(&obs(&[1.0, 2.0], 0.1)).is_err());
        assert!(ml_estimate_gbm(&obs(&[1.0, -2.0, 3.0], 0.1)).is_err());
        let mut o = obs(&[1.0, 2.0, 3.0], 0.1);
        o[2].time = 0.5;
        assert!(ml_estimate_gbm(&o).is_err());
    }

    #[test]
    fn simplex_finds_quadratic_minimum() {
        let (x, c) = nelder_mead(|z| (z[0] - 1.0).powi(2) + 3.0 * (z[1] + 2.0).powi(2), &[0.0, 0.0], &[1.0, 1.0], 1e-16)
            .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] + 2.0).abs() < 1e-6, "{x:?}");
        assert!(c < 1e-12);
    }
}
