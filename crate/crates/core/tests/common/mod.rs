#![allow(dead_code)]

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdeinfer::bridge::MilsteinBridge;
use sdeinfer::density::milstein_logdensity;
use sdeinfer::milstein_support_bound;
use sdeinfer::quadrature::{adaptive_gauss_legendre, gauss_legendre};
use sdeinfer::scheme::{simulate_path, PathScheme};
use sdeinfer::{DiffusionModel, Gbm, GbmParams, Observation};
use statrs::distribution::{Continuous, LogNormal};

/// Kolmogorov–Smirnov distance given the model CDF at the sorted samples.
pub fn ks_from_cdf(cdf_at_sorted: &[f64]) -> f64 {
    let n = cdf_at_sorted.len() as f64;
    cdf_at_sorted
        .iter()
        .enumerate()
        .map(|(i, &f)| (f - i as f64 / n).abs().max((f - (i as f64 + 1.0) / n).abs()))
        .fold(0.0, f64::max)
}

/// Cumulative integral of a bounded `f` from `start` to each sorted point,
/// one 16-node panel between consecutive points.
pub fn cumulative<F: Fn(f64) -> f64>(f: F, start: f64, sorted: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sorted.len());
    let (mut acc, mut a) = (0.0, start);
    for &b in sorted {
        if b > a {
            acc += gauss_legendre(&f, a, b, 1);
            a = b;
        }
        out.push(acc);
    }
    out
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Milstein transition density in `u = √(y − b)` coordinates, `b` the
/// lower support bound (bounded there).
pub fn milstein_u_density<'a, M: DiffusionModel>(model: &'a M, p: &M::Params, y_from: f64, dt: f64) -> (f64, impl Fn(f64) -> f64 + 'a)
where
    M::Params: Copy,
{
    let b = milstein_support_bound(model, p, y_from, dt).bound;
    let pp = *p;
    (b, move |u: f64| {
        let y = b + u * u;
        match milstein_logdensity(model, &pp, y_from, y, dt) {
            Ok(l) if l.is_finite() => 2.0 * u * l.exp(),
            _ => 0.0,
        }
    })
}

/// Total mass of the Milstein density with a lower support bound, by
/// adaptive quadrature in `u = √(y − b)` out to `u_max`.
pub fn milstein_mass<M: DiffusionModel>(model: &M, p: &M::Params, y_from: f64, dt: f64, u_max: f64) -> f64
where
    M::Params: Copy,
{
    let (_, h) = milstein_u_density(model, p, y_from, dt);
    let panels = 64;
    let w = u_max / panels as f64;
    (0..panels).map(|i| adaptive_gauss_legendre(&h, i as f64 * w, (i + 1) as f64 * w, 1e-12, 30)).sum()
}

/// KS distance between samples and the calibrated bridge's normalised law,
/// computed in frame coordinates.
pub fn bridge_ks<M: DiffusionModel>(bridge: &MilsteinBridge, model: &M, p: &M::Params, samples: &[f64]) -> f64 {
    let mut v: Vec<f64> = samples.iter().map(|&y| bridge.frame.from_y(y)).collect();
    v.sort_by(f64::total_cmp);
    let z = bridge.log_norm_const;
    let g = |t: f64| {
        let l = bridge.frame_logdensity(model, p, t);
        if l.is_finite() {
            (l - z).exp()
        } else {
            0.0
        }
    };
    ks_from_cdf(&cumulative(g, bridge.v_lo, &v))
}

/// `(slope, intercept)` of the least-squares line.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Mean absolute terminal error of Euler and Milstein against the exact GBM
/// solution on grids of `2^k` steps over `[0, 1]`, coupled increments.
pub fn strong_errors(dts: &[usize], paths: usize) -> (Vec<f64>, Vec<f64>) {
    let p = GbmParams { alpha: 1.0, sigma: 0.5 };
    let mut e_err = Vec::new();
    let mut m_err = Vec::new();
    for &k in dts {
        let steps = 1usize << k;
        let times: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        let (mut se, mut sm) = (0.0, 0.0);
        for seed in 0..paths as u64 {
            let run = |s| simulate_path(&Gbm, &p, s, 100.0, &times, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let exact = *run(PathScheme::Exact).values.last().unwrap();
            se += (run(PathScheme::Euler).values.last().unwrap() - exact).abs();
            sm += (run(PathScheme::Milstein).values.last().unwrap() - exact).abs();
        }
        e_err.push(se / paths as f64);
        m_err.push(sm / paths as f64);
    }
    (e_err, m_err)
}

/// Negative log-likelihood from log-normal transition densities.
pub struct NegLogLik<'a>(&'a [Observation]);

impl CostFunction for NegLogLik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        let (alpha, s2) = (p[0], p[1]);
        if s2.is_nan() || s2 <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let mut total = 0.0;
        for w in self.0.windows(2) {
            let dt = w[1].time - w[0].time;
            let law = LogNormal::new(w[0].value.ln() + (alpha - 0.5 * s2) * dt, (s2 * dt).sqrt()).unwrap();
            total -= law.ln_pdf(w[1].value);
        }
        Ok(total)
    }
}

/// ML `(α, σ²)` by Nelder–Mead on [`NegLogLik`], restarted twice from the best
/// vertex with a smaller simplex.
pub fn numerical_ml(obs: &[Observation]) -> Vec<f64> {
    let mut best = vec![1.0, 1.0];
    for step in [0.5, 1e-2, 1e-4] {
        let simplex = vec![best.clone(), vec![best[0] + step, best[1]], vec![best[0], best[1] + step]];
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-15).unwrap();
        let res = Executor::new(NegLogLik(obs), solver).configure(|s| s.max_iters(20_000)).run().unwrap();
        best = res.state().get_best_param().unwrap().clone();
    }
    best
}
