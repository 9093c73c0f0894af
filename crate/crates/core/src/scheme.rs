//! Euler-Maruyama and Milstein steppers, time grids, augmented paths and
//! synthetic data generation.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DiffusionModel;
use crate::output::fmt17;

/// Discretisation scheme used for a transition density or a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Milstein,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Euler, Scheme::Milstein];

    pub fn label(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Milstein => "milstein",
        }
    }

    #[inline]
    pub fn step<M: DiffusionModel + ?Sized>(
        self,
        model: &M,
        p: &M::Params,
        y: f64,
        dt: f64,
        db: f64,
    ) -> f64 {
        match self {
            Scheme::Euler => euler_step(model, p, y, dt, db),
            Scheme::Milstein => milstein_step(model, p, y, dt, db),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" | "e" | "em" | "euler-maruyama" => Ok(Scheme::Euler),
            "milstein" | "mil" | "m" => Ok(Scheme::Milstein),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// `y + μ dt + σ dB`.
#[inline]
pub fn euler_step<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    y: f64,
    dt: f64,
    db: f64,
) -> f64 {
    y + model.drift(y, p) * dt + model.diffusion(y, p) * db
}

/// Euler step plus `½ σ σ' (dB² − dt)`.
#[inline]
pub fn milstein_step<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    y: f64,
    dt: f64,
    db: f64,
) -> f64 {
    let c = model.coefficients(y, p);
    y + c.mu * dt + c.sigma * db + 0.5 * c.sigma * c.sigma_deriv * (db * db - dt)
}

/// Time grid with observation times marked. Between consecutive
/// observations there are exactly `m − 1` imputation points.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    obs_index: Vec<usize>,
    observed: Vec<bool>,
    m: usize,
}

impl TimeGrid {
    /// Splits every gap between consecutive observation times into `m`
    /// equal subintervals.
    pub fn augmented(obs_times: &[f64], m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Grid("m must be at least 1".into()));
        }
        if obs_times.is_empty() {
            return Err(Error::Grid("no observation times".into()));
        }
        if obs_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Grid("observation times must be strictly increasing".into()));
        }
        let mut times = Vec::with_capacity((obs_times.len() - 1) * m + 1);
        let mut obs_index = Vec::with_capacity(obs_times.len());
        for (i, &t) in obs_times.iter().enumerate() {
            obs_index.push(times.len());
            times.push(t);
            if let Some(&next) = obs_times.get(i + 1) {
                let h = (next - t) / m as f64;
                for j in 1..m {
                    times.push(t + j as f64 * h);
                }
            }
        }
        let mut observed = vec![false; times.len()];
        for &k in &obs_index {
            observed[k] = true;
        }
        Ok(Self { times, obs_index, observed, m })
    }

    /// `n_points` equidistant observation times on `[0, horizon]`.
    pub fn equidistant(n_points: usize, horizon: f64) -> Result<Self> {
        Self::augmented(&equidistant_times(n_points, horizon)?, 1)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn obs_index(&self) -> &[usize] {
        &self.obs_index
    }

    pub fn is_observed(&self, k: usize) -> bool {
        self.observed[k]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of subintervals `n` (the path has `n + 1` points).
    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    #[inline]
    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }
}

pub fn equidistant_times(n_points: usize, horizon: f64) -> Result<Vec<f64>> {
    if n_points == 0 || !(horizon > 0.0) && n_points > 1 {
        return Err(Error::Grid(format!("{n_points} points on horizon {horizon}")));
    }
    if n_points == 1 {
        return Ok(vec![0.0]);
    }
    let h = horizon / (n_points - 1) as f64;
    Ok((0..n_points).map(|i| i as f64 * h).collect())
}

/// Observed points plus imputed points on a [`TimeGrid`]. Observed values
/// cannot change after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl AugmentedPath {
    /// Imputed points start on the straight line between their observations.
    pub fn from_observations(observations: &[Observation], m: usize) -> Result<Self> {
        let times: Vec<f64> = observations.iter().map(|o| o.time).collect();
        let grid = TimeGrid::augmented(&times, m)?;
        let mut values = Vec::with_capacity(grid.len());
        for (i, o) in observations.iter().enumerate() {
            values.push(o.value);
            if let Some(next) = observations.get(i + 1) {
                for j in 1..m {
                    let w = j as f64 / m as f64;
                    values.push(o.value + w * (next.value - o.value));
                }
            }
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.grid
            .obs_index()
            .iter()
            .map(|&k| Observation { time: self.grid.times[k], value: self.values[k] })
            .collect()
    }

    pub fn imputed_count(&self) -> usize {
        self.values.len() - self.grid.obs_index.len()
    }

    /// Overwrites an imputed point. Panics on an observed index.
    pub(crate) fn set_imputed(&mut self, k: usize, value: f64) {
        assert!(!self.grid.is_observed(k), "observed point {k} is immutable");
        self.values[k] = value;
    }

    pub fn is_valid<M: DiffusionModel + ?Sized>(&self, model: &M) -> bool {
        self.values.iter().all(|&x| model.in_state_space(x))
    }
}

/// Scheme iterates on a grid. `first_violation` is the first index whose
/// value left the state space; iteration is not clamped.
#[derive(Clone, Debug)]
pub struct SimulatedPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub first_violation: Option<usize>,
}

impl SimulatedPath {
    pub fn is_valid(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// How a path is iterated in [`simulate_path`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathScheme {
    Euler,
    Milstein,
    Exact,
}

/// Simulates a path, drawing `dB_k ~ N(0, Δt_k)` in grid order. Paths of
/// different schemes driven by identically seeded RNGs share their Brownian
/// increments.
pub fn simulate_path<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    p: &M::Params,
    scheme: PathScheme,
    x0: f64,
    times: &[f64],
    rng: &mut R,
) -> Result<SimulatedPath> {
    if times.is_empty() {
        return Err(Error::Grid("empty grid".into()));
    }
    if scheme == PathScheme::Exact && model.exact_step(p, x0, 1.0, 0.0).is_none() {
        return Err(Error::Unsupported("exact simulation", model.name().into()));
    }
    let mut values = Vec::with_capacity(times.len());
    values.push(x0);
    let mut first_violation = (!model.in_state_space(x0)).then_some(0);
    let mut y = x0;
    for (k, w) in times.windows(2).enumerate() {
        let dt = w[1] - w[0];
        let z: f64 = rng.sample(StandardNormal);
        let db = dt.sqrt() * z;
        y = match scheme {
            PathScheme::Euler => euler_step(model, p, y, dt, db),
            PathScheme::Milstein => milstein_step(model, p, y, dt, db),
            PathScheme::Exact => model.exact_step(p, y, dt, db).expect("checked above"),
        };
        if first_violation.is_none() && !model.in_state_space(y) {
            first_violation = Some(k + 1);
        }
        values.push(y);
    }
    Ok(SimulatedPath { times: times.to_vec(), values, first_violation })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
}

/// How synthetic observations are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataGeneration {
    /// Exact transitions between observation times.
    Exact,
    /// Euler iterates with step at most `max_step`, kept at the observation
    /// times only.
    FineEuler { max_step: f64 },
}

const MAX_GENERATION_ATTEMPTS: usize = 100;

/// `count` equidistant observations on `[0, horizon]` starting at `x0`.
///
/// A fine-Euler path leaving the state space is discarded and redrawn from
/// the continuing RNG stream (at most 100 attempts).
pub fn generate_observations<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    p: &M::Params,
    x0: f64,
    count: usize,
    horizon: f64,
    how: DataGeneration,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    if count < 2 {
        return Err(Error::Grid(format!("need at least 2 observations, got {count}")));
    }
    let times = equidistant_times(count, horizon)?;
    match how {
        DataGeneration::Exact => {
            let path = simulate_path(model, p, PathScheme::Exact, x0, &times, rng)?;
            Ok(zip_observations(&path.times, &path.values))
        }
        DataGeneration::FineEuler { max_step } => {
            if !(max_step > 0.0) {
                return Err(Error::Grid(format!("fine step must be positive, got {max_step}")));
            }
            'attempt: for _ in 0..MAX_GENERATION_ATTEMPTS {
                let mut values = Vec::with_capacity(count);
                values.push(x0);
                let mut y = x0;
                for w in times.windows(2) {
                    let gap = w[1] - w[0];
                    let steps = (gap / max_step).ceil().max(1.0) as usize;
                    let dt = gap / steps as f64;
                    let sdt = dt.sqrt();
                    for _ in 0..steps {
                        let z: f64 = rng.sample(StandardNormal);
                        y = euler_step(model, p, y, dt, sdt * z);
                        if !model.in_state_space(y) {
                            continue 'attempt;
                        }
                    }
                    values.push(y);
                }
                return Ok(zip_observations(&times, &values));
            }
            Err(Error::Grid(format!(
                "fine Euler path left the state space in {MAX_GENERATION_ATTEMPTS} attempts"
            )))
        }
    }
}

fn zip_observations(times: &[f64], values: &[f64]) -> Vec<Observation> {
    times.iter().zip(values).map(|(&time, &value)| Observation { time, value }).collect()
}

/// `time,value` CSV with 17 significant digits.
pub fn write_observations_csv<W: Write>(mut w: W, obs: &[Observation]) -> std::io::Result<()> {
    writeln!(w, "time,value")?;
    for o in obs {
        writeln!(w, "{},{}", fmt17(o.time), fmt17(o.value))?;
    }
    Ok(())
}

pub fn read_observations_csv<R: BufRead>(r: R) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("time")) {
            continue;
        }
        let mut fields = line.split(',');
        let parse = |f: Option<&str>| -> Result<f64> {
            f.and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Config(format!("bad observation row {}: `{line}`", lineno + 1)))
        };
        let time = parse(fields.next())?;
        let value = parse(fields.next())?;
        out.push(Observation { time, value });
    }
    Ok(out)
}
