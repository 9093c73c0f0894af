//! Closed-form one-step transition densities of the Euler and Milstein
//! schemes, and the log-likelihood of an augmented path.
//!
//! The Milstein step `Y = a Z² + b Z + c` with `Z ~ N(0, 1)` is a quadratic
//! transform of a Gaussian, so its law has a one-sided support bound and an
//! integrable `1/√A` singularity there. Everything here works in log space.


use crate::error::{Error, Result};
use crate::model::{Coefficients, DiffusionModel};
use crate::scheme::{AugmentedPath, Scheme};

/// `|σ'| ≤ DERIV_ZERO_REL·|σ|` is treated as `σ' = 0`.
pub const DERIV_ZERO_REL: f64 = 1e-14;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundDirection {
    Lower,
    Upper,
    Unbounded,
}

/// Support edge of the Milstein transition density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportBound {
    pub bound: f64,
    pub direction: BoundDirection,
}

impl SupportBound {
    pub fn contains(&self, y: f64) -> bool {
        match self.direction {
            BoundDirection::Lower => y >= self.bound,
            BoundDirection::Upper => y <= self.bound,
            BoundDirection::Unbounded => true,
        }
    }
}

#[inline]
fn euler_reduces(c: &Coefficients) -> bool {
    c.sigma_deriv.abs() <= DERIV_ZERO_REL * c.sigma.abs()
}

/// Gaussian Euler density from precomputed coefficients. `σ = 0` gives the
/// degenerate point mass (`+inf` on the image, `-inf` elsewhere).
#[inline]
pub(crate) fn euler_logdensity_at(c: &Coefficients, y_from: f64, y_to: f64, dt: f64) -> f64 {
    let mean = y_from + c.mu * dt;
    let var = c.sigma * c.sigma * dt;
    if var <= 0.0 {
        return if y_to == mean { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    let d = y_to - mean;
    -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var)
}

/// Milstein density from precomputed coefficients.
#[inline]
pub(crate) fn milstein_logdensity_at(c: &Coefficients, y_from: f64, y_to: f64, dt: f64) -> f64 {
    // The law only depends on σ dB and σσ', so (σ, σ') → (−σ, −σ') is a symmetry.
    let (sigma, sd) = if c.sigma < 0.0 { (-c.sigma, -c.sigma_deriv) } else { (c.sigma, c.sigma_deriv) };
    if sigma == 0.0 {
        let image = y_from + (c.mu - 0.5 * sigma * sd) * dt;
        return if y_to == image { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    let c = Coefficients { mu: c.mu, sigma, sigma_deriv: sd };
    if euler_reduces(&c) {
        return euler_logdensity_at(&c, y_from, y_to, dt);
    }
    let w = y_to - y_from - (c.mu - 0.5 * sigma * sd) * dt;
    let a = sigma * sigma + 2.0 * sigma * sd * w;
    if a < 0.0 {
        return f64::NEG_INFINITY;
    }
    let sqrt_a = a.sqrt();
    // C = σ + σ'w > 0 on the support and C² − A = σ'²w², so −C/D + √A/D is
    // −w²/(σ dt (C + √A)) without cancellation.
    let cc = sigma + sd * w;
    let d = sigma * sd * sd * dt;
    -w * w / (sigma * dt * (cc + sqrt_a)) - 0.5 * (LN_2PI + (dt * a).ln())
        + (-2.0 * sqrt_a / d).exp().ln_1p()
}

#[inline]
pub(crate) fn logdensity_at(scheme: Scheme, c: &Coefficients, y_from: f64, y_to: f64, dt: f64) -> f64 {
    match scheme {
        Scheme::Euler => euler_logdensity_at(c, y_from, y_to, dt),
        Scheme::Milstein => milstein_logdensity_at(c, y_from, y_to, dt),
    }
}

#[inline]
pub(crate) fn transition_logdensity_fast<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    scheme: Scheme,
    y_from: f64,
    y_to: f64,
    dt: f64,
) -> f64 {
    logdensity_at(scheme, &model.coefficients(y_from, p), y_from, y_to, dt)
}

fn check_from<M: DiffusionModel + ?Sized>(model: &M, y_from: f64, dt: f64) -> Result<()> {
    let lower = model.state_lower_bound();
    if y_from.is_nan() || y_from < lower {
        return Err(Error::StateSpace { x: y_from, lower });
    }
    if !(dt > 0.0) {
        return Err(Error::Grid(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

/// Log of `N(y_to | y_from + μ dt, σ² dt)`.
pub fn euler_logdensity<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    y_from: f64,
    y_to: f64,
    dt: f64,
) -> Result<f64> {
    check_from(model, y_from, dt)?;
    let c = model.coefficients(y_from, p);
    if c.sigma == 0.0 {
        return Err(Error::ZeroDiffusion { x: y_from });
    }
    Ok(euler_logdensity_at(&c, y_from, y_to, dt))
}

/// Log of the Milstein transition density; `-inf` outside the support.
///
/// With `σ(y_from) = 0` the step is deterministic and the result is `+inf`
/// at the image point and `-inf` elsewhere.
pub fn milstein_logdensity<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    y_from: f64,
    y_to: f64,
    dt: f64,
) -> Result<f64> {
    check_from(model, y_from, dt)?;
    Ok(milstein_logdensity_at(&model.coefficients(y_from, p), y_from, y_to, dt))
}

pub fn transition_logdensity<M: DiffusionModel + ?Sized>(
    model: &M,
    scheme: Scheme,
    p: &M::Params,
    y_from: f64,
    y_to: f64,
    dt: f64,
) -> Result<f64> {
    match scheme {
        Scheme::Euler => euler_logdensity(model, p, y_from, y_to, dt),
        Scheme::Milstein => milstein_logdensity(model, p, y_from, y_to, dt),
    }
}

/// `y_from − ½σ/σ' + (μ − ½σσ')dt`, a lower bound when `σσ' > 0` and an upper
/// bound when `σσ' < 0`.
pub(crate) fn support_bound_at(c: &Coefficients, y_from: f64, dt: f64) -> SupportBound {
    if c.sigma == 0.0 || euler_reduces(c) {
        return SupportBound { bound: f64::NAN, direction: BoundDirection::Unbounded };
    }
    let bound = y_from - 0.5 * c.sigma / c.sigma_deriv + (c.mu - 0.5 * c.sigma * c.sigma_deriv) * dt;
    let direction = if c.sigma * c.sigma_deriv > 0.0 { BoundDirection::Lower } else { BoundDirection::Upper };
    SupportBound { bound, direction }
}

pub fn milstein_support_bound<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    y_from: f64,
    dt: f64,
) -> SupportBound {
    support_bound_at(&model.coefficients(y_from, p), y_from, dt)
}

/// Sum of transition log-densities over `values[from..=to]`.
#[inline]
pub(crate) fn segment_loglik<M: DiffusionModel + ?Sized>(
    model: &M,
    scheme: Scheme,
    p: &M::Params,
    times: &[f64],
    values: &[f64],
) -> f64 {
    let mut total = 0.0;
    for k in 0..values.len() - 1 {
        total += transition_logdensity_fast(model, p, scheme, values[k], values[k + 1], times[k + 1] - times[k]);
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    total
}

/// Log-likelihood of all consecutive transitions of an augmented path.
pub fn path_loglikelihood<M: DiffusionModel + ?Sized>(
    model: &M,
    scheme: Scheme,
    p: &M::Params,
    path: &AugmentedPath,
) -> f64 {
    segment_loglik(model, scheme, p, path.grid().times(), path.values())
}
