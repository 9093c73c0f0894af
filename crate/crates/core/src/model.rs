//! Scalar diffusion models `dX = μ(X, θ) dt + σ(X, θ) dB`, their priors and the
//! closed-form GBM solution.
//!
//! Parameters live in two spaces. The *chain* space is what the sampler moves
//! around in and what gets reported: `(α, σ²)` for GBM, `(β, σ²)` or
//! `(α, β, σ²)` for CIR. Each model converts a chain vector into its *natural*
//! parameters (with `σ = √σ²`) once per evaluation batch through
//! [`DiffusionModel::params`].

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bridge::{self, FeasibleSet};
use crate::error::{Error, Result};

/// Parameter vector in chain space.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    positive_mask: Vec<bool>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, positive_mask: Vec<bool>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("parameter vector is empty".into()));
        }
        if values.len() != positive_mask.len() {
            return Err(Error::Parameter(format!(
                "{} values but {} positivity flags",
                values.len(),
                positive_mask.len()
            )));
        }
        for (j, (&v, &pos)) in values.iter().zip(&positive_mask).enumerate() {
            if !v.is_finite() || (pos && v <= 0.0) {
                return Err(Error::Parameter(format!(
                    "component {j} = {v} violates its constraint"
                )));
            }
        }
        Ok(Self { values, positive_mask })
    }

    pub fn for_model<M: DiffusionModel + ?Sized>(model: &M, values: Vec<f64>) -> Result<Self> {
        Self::new(values, model.positive_mask().to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn positive_mask(&self) -> &[bool] {
        &self.positive_mask
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Drift, diffusion and diffusion derivative at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub mu: f64,
    pub sigma: f64,
    pub sigma_deriv: f64,
}

pub trait DiffusionModel: Send + Sync {
    /// Natural parameters, prepared once from a chain-space vector.
    type Params: Copy + Send + Sync + std::fmt::Debug;

    fn name(&self) -> &'static str;

    /// Chain-space parameter names, e.g. `["alpha", "sigma2"]`.
    fn param_names(&self) -> &'static [&'static str];

    fn positive_mask(&self) -> &'static [bool];

    /// Lower end of the state space; `-inf` when unbounded.
    fn state_lower_bound(&self) -> f64 {
        f64::NEG_INFINITY
    }

    /// Whether `x` may appear on a path. GBM and CIR paths are kept strictly
    /// above the lower bound.
    fn in_state_space(&self, x: f64) -> bool {
        x.is_finite() && x > self.state_lower_bound()
    }

    fn params(&self, theta: &[f64]) -> Result<Self::Params>;

    fn drift(&self, x: f64, p: &Self::Params) -> f64;

    fn diffusion(&self, x: f64, p: &Self::Params) -> f64;

    /// ∂σ/∂x at `x`.
    fn diffusion_deriv(&self, x: f64, p: &Self::Params) -> f64;

    #[inline]
    fn coefficients(&self, x: f64, p: &Self::Params) -> Coefficients {
        Coefficients {
            mu: self.drift(x, p),
            sigma: self.diffusion(x, p),
            sigma_deriv: self.diffusion_deriv(x, p),
        }
    }

    /// Exact transition log-density, when the model has one.
    fn exact_logdensity(&self, _p: &Self::Params, _x: f64, _y: f64, _dt: f64) -> Option<f64> {
        None
    }

    /// Exact transition driven by the Brownian increment `db`, when available.
    fn exact_step(&self, _p: &Self::Params, _x: f64, _dt: f64, _db: f64) -> Option<f64> {
        None
    }

    /// Set of candidate points where both Milstein bridge factors are
    /// positive. The default only knows the first factor's support bound and
    /// the state space; GBM and CIR override it with the closed forms.
    fn bridge_feasible_set(
        &self,
        p: &Self::Params,
        x_left: f64,
        x_right: f64,
        dt_k: f64,
        dt_plus: f64,
    ) -> FeasibleSet {
        bridge::generic_feasible_set(self, p, x_left, x_right, dt_k, dt_plus)
    }
}

/// `(μ, σ, σ')` at `x`, rejecting states below the state-space bound.
pub fn model_eval<M: DiffusionModel + ?Sized>(
    model: &M,
    x: f64,
    theta: &ParameterVector,
) -> Result<Coefficients> {
    let lower = model.state_lower_bound();
    if x.is_nan() || x < lower {
        return Err(Error::StateSpace { x, lower });
    }
    let p = model.params(theta.values())?;
    Ok(model.coefficients(x, &p))
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Parameter(format!("{name} must be strictly positive, got {v}")))
    }
}

// ---------------------------------------------------------------------------
// Geometric Brownian motion

/// `dX = αX dt + σX dB` on `(0, ∞)`. Chain parameters `(α, σ²)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Gbm;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GbmParams {
    pub alpha: f64,
    pub sigma: f64,
}

impl GbmParams {
    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }
}

impl DiffusionModel for Gbm {
    type Params = GbmParams;

    fn name(&self) -> &'static str {
        "gbm"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["alpha", "sigma2"]
    }

    fn positive_mask(&self) -> &'static [bool] {
        &[false, true]
    }

    fn state_lower_bound(&self) -> f64 {
        0.0
    }

    fn params(&self, theta: &[f64]) -> Result<GbmParams> {
        let [alpha, sigma2] = theta else {
            return Err(Error::Parameter(format!("gbm takes 2 parameters, got {}", theta.len())));
        };
        if !alpha.is_finite() {
            return Err(Error::Parameter(format!("alpha must be finite, got {alpha}")));
        }
        Ok(GbmParams { alpha: *alpha, sigma: positive("sigma2", *sigma2)?.sqrt() })
    }

    #[inline]
    fn drift(&self, x: f64, p: &GbmParams) -> f64 {
        p.alpha * x
    }

    #[inline]
    fn diffusion(&self, x: f64, p: &GbmParams) -> f64 {
        p.sigma * x
    }

    #[inline]
    fn diffusion_deriv(&self, _x: f64, p: &GbmParams) -> f64 {
        p.sigma
    }

    fn exact_logdensity(&self, p: &GbmParams, x: f64, y: f64, dt: f64) -> Option<f64> {
        gbm_exact_transition_logdensity(x, y, dt, p).ok()
    }

    fn exact_step(&self, p: &GbmParams, x: f64, dt: f64, db: f64) -> Option<f64> {
        Some(x * ((p.alpha - 0.5 * p.sigma2()) * dt + p.sigma * db).exp())
    }

    fn bridge_feasible_set(
        &self,
        p: &GbmParams,
        x_left: f64,
        x_right: f64,
        dt_k: f64,
        dt_plus: f64,
    ) -> FeasibleSet {
        bridge::gbm_feasible_set(p, x_left, x_right, dt_k, dt_plus)
    }
}

/// Log of the lognormal GBM transition density of `y` given `x` after `dt`.
pub fn gbm_exact_transition_logdensity(x: f64, y: f64, dt: f64, p: &GbmParams) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::StateSpace { x, lower: 0.0 });
    }
    if !(y > 0.0) {
        return Err(Error::StateSpace { x: y, lower: 0.0 });
    }
    if !(dt > 0.0) {
        return Err(Error::Grid(format!("time step must be positive, got {dt}")));
    }
    let var = p.sigma2() * dt;
    let r = (y / x).ln() - (p.alpha - 0.5 * p.sigma2()) * dt;
    Ok(-0.5 * (2.0 * PI * var).ln() - y.ln() - r * r / (2.0 * var))
}

/// One exact GBM transition: `x·exp((α − σ²/2)dt + σ√dt·Z)`.
pub fn gbm_exact_sample<R: Rng + ?Sized>(x: f64, dt: f64, p: &GbmParams, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    x * ((p.alpha - 0.5 * p.sigma2()) * dt + p.sigma * dt.sqrt() * z).exp()
}

// ---------------------------------------------------------------------------
// Cox-Ingersoll-Ross

/// `dX = α(β − X) dt + σ√X dB` on `[0, ∞)`.
///
/// With `known_alpha` set, the chain estimates `(β, σ²)` only; otherwise
/// `(α, β, σ²)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Cir {
    pub known_alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CirParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl CirParams {
    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Feller condition `2αβ > σ²`: the process never reaches zero.
    pub fn is_strictly_positive(&self) -> bool {
        2.0 * self.alpha * self.beta > self.sigma2()
    }
}

impl Cir {
    pub fn with_known_alpha(alpha: f64) -> Self {
        Self { known_alpha: Some(alpha) }
    }

    pub fn full() -> Self {
        Self { known_alpha: None }
    }
}

/// CIR model with every parameter estimated, plus its natural parameters.
pub fn cir_model(alpha: f64, beta: f64, sigma: f64) -> Result<(Cir, CirParams)> {
    Ok((
        Cir::full(),
        CirParams {
            alpha: positive("alpha", alpha)?,
            beta: positive("beta", beta)?,
            sigma: positive("sigma", sigma)?,
        },
    ))
}

impl DiffusionModel for Cir {
    type Params = CirParams;

    fn name(&self) -> &'static str {
        "cir"
    }

    fn param_names(&self) -> &'static [&'static str] {
        if self.known_alpha.is_some() {
            &["beta", "sigma2"]
        } else {
            &["alpha", "beta", "sigma2"]
        }
    }

    fn positive_mask(&self) -> &'static [bool] {
        if self.known_alpha.is_some() {
            &[true, true]
        } else {
            &[true, true, true]
        }
    }

    fn state_lower_bound(&self) -> f64 {
        0.0
    }

    fn params(&self, theta: &[f64]) -> Result<CirParams> {
        let (alpha, beta, sigma2) = match (self.known_alpha, theta) {
            (Some(a), [b, s2]) => (a, *b, *s2),
            (None, [a, b, s2]) => (*a, *b, *s2),
            _ => {
                return Err(Error::Parameter(format!(
                    "cir takes {} parameters, got {}",
                    self.param_names().len(),
                    theta.len()
                )))
            }
        };
        Ok(CirParams {
            alpha: positive("alpha", alpha)?,
            beta: positive("beta", beta)?,
            sigma: positive("sigma2", sigma2)?.sqrt(),
        })
    }

    #[inline]
    fn drift(&self, x: f64, p: &CirParams) -> f64 {
        p.alpha * (p.beta - x)
    }

    #[inline]
    fn diffusion(&self, x: f64, p: &CirParams) -> f64 {
        p.sigma * x.max(0.0).sqrt()
    }

    #[inline]
    fn diffusion_deriv(&self, x: f64, p: &CirParams) -> f64 {
        p.sigma / (2.0 * x.sqrt())
    }

    fn bridge_feasible_set(
        &self,
        p: &CirParams,
        x_left: f64,
        x_right: f64,
        dt_k: f64,
        dt_plus: f64,
    ) -> FeasibleSet {
        bridge::cir_feasible_set(p, x_left, x_right, dt_k, dt_plus)
    }
}

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck

/// `dX = α(β − X) dt + σ dB` on the real line. Its diffusion is constant, so
/// the Milstein scheme coincides with Euler. Chain parameters `(α, β, σ²)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OrnsteinUhlenbeck;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl DiffusionModel for OrnsteinUhlenbeck {
    type Params = OuParams;

    fn name(&self) -> &'static str {
        "ou"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["alpha", "beta", "sigma2"]
    }

    fn positive_mask(&self) -> &'static [bool] {
        &[false, false, true]
    }

    fn params(&self, theta: &[f64]) -> Result<OuParams> {
        let [alpha, beta, sigma2] = theta else {
            return Err(Error::Parameter(format!("ou takes 3 parameters, got {}", theta.len())));
        };
        Ok(OuParams { alpha: *alpha, beta: *beta, sigma: positive("sigma2", *sigma2)?.sqrt() })
    }

    #[inline]
    fn drift(&self, x: f64, p: &OuParams) -> f64 {
        p.alpha * (p.beta - x)
    }

    #[inline]
    fn diffusion(&self, _x: f64, p: &OuParams) -> f64 {
        p.sigma
    }

    #[inline]
    fn diffusion_deriv(&self, _x: f64, _p: &OuParams) -> f64 {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Priors

/// One independent prior component. Second arguments are variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Normal { mean: f64, variance: f64 },
    LogNormal { log_mean: f64, log_variance: f64 },
    InverseGamma { shape: f64, scale: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Normal { mean, variance } => mean.is_finite() && variance > 0.0,
            Prior::LogNormal { log_mean, log_variance } => log_mean.is_finite() && log_variance > 0.0,
            Prior::InverseGamma { shape, scale } => shape > 0.0 && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid prior {self:?}")))
        }
    }

    pub fn has_positive_support(&self) -> bool {
        !matches!(self, Prior::Normal { .. })
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, variance } => {
                let d = x - mean;
                -0.5 * (2.0 * PI * variance).ln() - d * d / (2.0 * variance)
            }
            Prior::LogNormal { log_mean, log_variance } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let d = x.ln() - log_mean;
                -0.5 * (2.0 * PI * log_variance).ln() - x.ln() - d * d / (2.0 * log_variance)
            }
            Prior::InverseGamma { shape, scale } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
            }
        }
    }

    /// Prior mean; `None` for an inverse gamma with shape ≤ 1.
    pub fn mean(&self) -> Option<f64> {
        match *self {
            Prior::Normal { mean, .. } => Some(mean),
            Prior::LogNormal { log_mean, log_variance } => Some((log_mean + 0.5 * log_variance).exp()),
            Prior::InverseGamma { shape, scale } => (shape > 1.0).then(|| scale / (shape - 1.0)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Normal { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            Prior::LogNormal { log_mean, log_variance } => {
                let z: f64 = rng.sample(StandardNormal);
                (log_mean + log_variance.sqrt() * z).exp()
            }
            Prior::InverseGamma { shape, scale } => {
                let g = Gamma::new(shape, 1.0 / scale).expect("validated prior");
                1.0 / g.sample(rng)
            }
        }
    }
}

/// Independent priors, one per chain-space component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub components: Vec<Prior>,
}

impl PriorSpec {
    pub fn new(components: Vec<Prior>) -> Result<Self> {
        for c in &components {
            c.validate()?;
        }
        Ok(Self { components })
    }

    /// Priors of the GBM study: `α ~ N(0, 10)`, `σ² ~ IG(2, 2)`.
    pub fn gbm_study() -> Self {
        Self {
            components: vec![
                Prior::Normal { mean: 0.0, variance: 10.0 },
                Prior::InverseGamma { shape: 2.0, scale: 2.0 },
            ],
        }
    }

    /// Priors of the CIR study with α known: `β ~ IG(3, 3)`, `σ² ~ IG(3, 4)`.
    pub fn cir_study() -> Self {
        Self {
            components: vec![
                Prior::InverseGamma { shape: 3.0, scale: 3.0 },
                Prior::InverseGamma { shape: 3.0, scale: 4.0 },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Sum of component log-densities; `-inf` outside the support.
    pub fn logdensity(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.components.len());
        self.components.iter().zip(theta).map(|(c, &x)| c.logpdf(x)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.components.iter().map(|c| c.sample(rng)).collect()
    }
}

/// `prior_logdensity(prior, θ)`.
pub fn prior_logdensity(prior: &PriorSpec, theta: &ParameterVector) -> f64 {
    prior.logdensity(theta.values())
}
