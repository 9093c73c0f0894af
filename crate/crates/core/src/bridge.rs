//! Path-segment proposals between two fixed points.
//!
//! * Left-conditioned (LC): interior points are drawn forward with the
//!   scheme's own step, ignoring the right end.
//! * Modified bridge (MB) with Euler: the frozen-coefficient Gaussian bridge.
//! * Modified bridge with Milstein: the product
//!   `π(y | x_left) · π(x_right | y)` of two Milstein densities. It has no
//!   closed-form normaliser, so each point is calibrated numerically (maximum,
//!   `1e-20` truncation interval, quadrature) and drawn by rejection sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{milstein_logdensity_at, support_bound_at, BoundDirection, segment_loglik};
use crate::error::Result;
use crate::mcmc::{MethodCombo, ProposalStrategy};
use crate::model::{CirParams, Coefficients, DiffusionModel, GbmParams};
use crate::quadrature::adaptive_gauss_legendre;
use crate::scheme::{AugmentedPath, Scheme};

// ---------------------------------------------------------------------------
// Feasible sets

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeasibleKind {
    Empty,
    BoundedInterval,
    HalfLine,
}

/// Candidate points with positive Milstein bridge density. The `singular_*`
/// flags mark ends where one of the two factors has its `1/√A` blow-up (as
/// opposed to the plain state-space bound).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeasibleSet {
    pub kind: FeasibleKind,
    pub lower: f64,
    pub upper: f64,
    pub singular_lower: bool,
    pub singular_upper: bool,
}

impl FeasibleSet {
    pub const EMPTY: FeasibleSet = FeasibleSet {
        kind: FeasibleKind::Empty,
        lower: f64::NAN,
        upper: f64::NAN,
        singular_lower: false,
        singular_upper: false,
    };

    fn interval(lower: f64, upper: f64, singular_lower: bool, singular_upper: bool) -> Self {
        if lower > upper {
            return Self::EMPTY;
        }
        let kind = if upper == f64::INFINITY { FeasibleKind::HalfLine } else { FeasibleKind::BoundedInterval };
        Self { kind, lower, upper, singular_lower, singular_upper }
    }

    pub fn is_empty(&self) -> bool {
        self.kind == FeasibleKind::Empty
    }

    pub fn contains(&self, y: f64) -> bool {
        !self.is_empty() && y >= self.lower && y <= self.upper
    }
}

/// GBM closed form. With `κ = ½ + (α − σ²/2)Δ`: the first factor needs
/// `y ≥ l_1st = x_left·κ(Δt_k)`; the second needs `y ≤ u_2nd = x_right/κ(Δ₊)`
/// when `κ(Δ₊) > 0` (case I) and nothing extra otherwise (cases II/III).
pub fn gbm_feasible_set(p: &GbmParams, x_left: f64, x_right: f64, dt_k: f64, dt_plus: f64) -> FeasibleSet {
    let c = p.alpha - 0.5 * p.sigma2();
    let l_first = x_left * (0.5 + c * dt_k);
    let lower = l_first.max(0.0);
    let kappa = 0.5 + c * dt_plus;
    if kappa > 0.0 {
        let u_second = x_right / kappa;
        if l_first > u_second {
            return FeasibleSet::EMPTY;
        }
        FeasibleSet::interval(lower, u_second, l_first > 0.0, true)
    } else {
        FeasibleSet::interval(lower, f64::INFINITY, l_first > 0.0, false)
    }
}

/// CIR closed form: `[max(0, l_left, l_right), ∞)` with
/// `l_left = (α(β − x_left) − σ²/4)Δt_k` and
/// `l_right = β − (x_right/Δ₊ + σ²/4)/α`.
pub fn cir_feasible_set(p: &CirParams, x_left: f64, x_right: f64, dt_k: f64, dt_plus: f64) -> FeasibleSet {
    let s2 = p.sigma2();
    let l_left = (p.alpha * (p.beta - x_left) - 0.25 * s2) * dt_k;
    let l_right = p.beta - (x_right / dt_plus + 0.25 * s2) / p.alpha;
    let l = l_left.max(l_right);
    FeasibleSet::interval(l.max(0.0), f64::INFINITY, l > 0.0, false)
}

/// Fallback for models without a closed form: the first factor's support
/// bound intersected with the state space. The second factor is left to the
/// density itself (it evaluates to `-inf` where infeasible).
pub fn generic_feasible_set<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    x_left: f64,
    _x_right: f64,
    dt_k: f64,
    _dt_plus: f64,
) -> FeasibleSet {
    let lb = model.state_lower_bound();
    let sb = support_bound_at(&model.coefficients(x_left, p), x_left, dt_k);
    match sb.direction {
        BoundDirection::Lower => FeasibleSet::interval(sb.bound.max(lb), f64::INFINITY, sb.bound > lb, false),
        BoundDirection::Upper => FeasibleSet::interval(lb, sb.bound, false, true),
        BoundDirection::Unbounded => FeasibleSet::interval(lb, f64::INFINITY, false, false),
    }
}

pub fn mb_feasible_set<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    x_left: f64,
    x_right: f64,
    dt_k: f64,
    dt_plus: f64,
) -> FeasibleSet {
    model.bridge_feasible_set(p, x_left, x_right, dt_k, dt_plus)
}

// ---------------------------------------------------------------------------
// Configuration, proposals, failures

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    /// Redraws allowed when a proposed point leaves the state space.
    pub reproposal_cap: usize,
    /// Rejection-sampler tries before switching to the Euler bridge.
    pub rejection_cap: usize,
    /// Relative density level bounding the truncation interval.
    pub truncation: f64,
    /// Absolute quadrature tolerance for the max-rescaled density, per unit
    /// of bulk width.
    pub quad_tolerance: f64,
    /// Points in the initial scan for the maximum.
    pub scan_points: usize,
    /// Normalise every Milstein bridge point, including those whose left
    /// neighbour is fixed (where the constant cancels).
    pub always_normalize: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            reproposal_cap: 1000,
            rejection_cap: 100_000,
            truncation: 1e-20,
            quad_tolerance: 1e-8,
            scan_points: 33,
            always_normalize: false,
        }
    }
}

/// Proposed interior values of one segment with both proposal densities.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentProposal {
    pub proposed_values: Vec<f64>,
    pub log_q_forward: f64,
    pub log_q_reverse: f64,
    pub fallback_count: u64,
    pub reproposal_count: u64,
}

/// No valid point within the re-proposal cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProposalFailure {
    pub reproposal_count: u64,
}

/// Reasons the Milstein bridge falls back to the Euler bridge for a point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    EmptyFeasibleSet,
    NoMass,
    RejectionCap,
}

fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

// ---------------------------------------------------------------------------
// Left-conditioned proposal

/// Draws `times.len() − 2` interior points forward from `x_left` with the
/// scheme's step. `times` spans the whole segment including both fixed ends;
/// `current` holds the current interior values for the reverse density.
#[allow(clippy::too_many_arguments)]
pub fn lc_propose<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    scheme: Scheme,
    p: &M::Params,
    times: &[f64],
    x_left: f64,
    current: &[f64],
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<SegmentProposal, ProposalFailure> {
    let n_interior = times.len().saturating_sub(2);
    debug_assert_eq!(current.len(), n_interior);
    let mut values = Vec::with_capacity(n_interior + 1);
    values.push(x_left);
    let mut reproposals = 0u64;
    for k in 0..n_interior {
        let dt = times[k + 1] - times[k];
        let sdt = dt.sqrt();
        let y = values[k];
        let mut tries = 0;
        let next = loop {
            let z: f64 = rng.sample(StandardNormal);
            let cand = scheme.step(model, p, y, dt, sdt * z);
            if model.in_state_space(cand) {
                break cand;
            }
            reproposals += 1;
            tries += 1;
            if tries >= cfg.reproposal_cap {
                return Err(ProposalFailure { reproposal_count: reproposals });
            }
        };
        values.push(next);
    }
    let log_q_forward = segment_loglik(model, scheme, p, &times[..=n_interior], &values);
    let mut rev = Vec::with_capacity(n_interior + 1);
    rev.push(x_left);
    rev.extend_from_slice(current);
    let log_q_reverse = segment_loglik(model, scheme, p, &times[..=n_interior], &rev);
    values.remove(0);
    Ok(SegmentProposal {
        proposed_values: values,
        log_q_forward,
        log_q_reverse,
        fallback_count: 0,
        reproposal_count: reproposals,
    })
}

// ---------------------------------------------------------------------------
// Euler modified bridge

/// Gaussian bridge step from `(t_k, x_left)` to `t_{k+1}` towards
/// `(τ_end, x_right)` with coefficients frozen at `x_left`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerBridge {
    pub mean: f64,
    pub var: f64,
}

impl EulerBridge {
    pub fn new<M: DiffusionModel + ?Sized>(
        model: &M,
        p: &M::Params,
        x_left: f64,
        x_right: f64,
        t_k: f64,
        t_next: f64,
        tau_end: f64,
    ) -> Self {
        let dt = t_next - t_k;
        let remaining = tau_end - t_k;
        let sigma = model.diffusion(x_left, p);
        Self {
            mean: x_left + (x_right - x_left) / remaining * dt,
            var: (tau_end - t_next) / remaining * sigma * sigma * dt,
        }
    }

    pub fn logpdf(&self, y: f64) -> f64 {
        if self.var <= 0.0 {
            return if y == self.mean { f64::INFINITY } else { f64::NEG_INFINITY };
        }
        normal_logpdf(y, self.mean, self.var)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.var.sqrt() * z
    }

    /// Draws until the point lies in the state space.
    pub fn sample<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        cap: usize,
        reproposals: &mut u64,
        rng: &mut R,
    ) -> Result<f64, ProposalFailure> {
        for _ in 0..cap.max(1) {
            let y = self.draw(rng);
            if model.in_state_space(y) {
                return Ok(y);
            }
            *reproposals += 1;
        }
        Err(ProposalFailure { reproposal_count: *reproposals })
    }
}

/// One MB Euler point and its proposal log-density.
#[allow(clippy::too_many_arguments)]
pub fn mb_euler_propose_point<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    p: &M::Params,
    x_left: f64,
    x_right: f64,
    t_k: f64,
    t_next: f64,
    tau_end: f64,
    cfg: &BridgeConfig,
    reproposals: &mut u64,
    rng: &mut R,
) -> Result<(f64, f64), ProposalFailure> {
    let bridge = EulerBridge::new(model, p, x_left, x_right, t_k, t_next, tau_end);
    let y = bridge.sample(model, cfg.reproposal_cap, reproposals, rng)?;
    Ok((y, bridge.logpdf(y)))
}

// ---------------------------------------------------------------------------
// Milstein modified bridge

/// `log π_Mil(y | x_left, Δt_k) + log π_Mil(x_right | y, Δ₊)`, `-inf` outside
/// the feasible set. Coefficients of the second factor are evaluated at `y`.
#[allow(clippy::too_many_arguments)]
pub fn mb_milstein_unnorm_logdensity<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    y: f64,
    x_left: f64,
    x_right: f64,
    dt_k: f64,
    dt_plus: f64,
) -> f64 {
    BridgeTarget::new(model, p, x_left, x_right, dt_k, dt_plus).logf(y)
}

struct BridgeTarget<'a, M: DiffusionModel + ?Sized> {
    model: &'a M,
    p: &'a M::Params,
    c_left: Coefficients,
    x_left: f64,
    x_right: f64,
    dt_k: f64,
    dt_plus: f64,
    feasible: FeasibleSet,
}

impl<'a, M: DiffusionModel + ?Sized> BridgeTarget<'a, M> {
    fn new(model: &'a M, p: &'a M::Params, x_left: f64, x_right: f64, dt_k: f64, dt_plus: f64) -> Self {
        Self {
            model,
            p,
            c_left: model.coefficients(x_left, p),
            x_left,
            x_right,
            dt_k,
            dt_plus,
            feasible: model.bridge_feasible_set(p, x_left, x_right, dt_k, dt_plus),
        }
    }

    #[inline]
    fn logf(&self, y: f64) -> f64 {
        if !self.feasible.contains(y) || !self.model.in_state_space(y) {
            return f64::NEG_INFINITY;
        }
        let first = milstein_logdensity_at(&self.c_left, self.x_left, y, self.dt_k);
        if first == f64::NEG_INFINITY {
            return first;
        }
        let c_y = self.model.coefficients(y, self.p);
        let lf = first + milstein_logdensity_at(&c_y, y, self.x_right, self.dt_plus);
        // a point rounded onto a singular bound has measure zero
        if lf < f64::INFINITY {
            lf
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Coordinates the bridge density is calibrated and sampled in. Near a
/// singular support bound `b` the density behaves like `1/√|y − b|`; in
/// `v = √|y − b|` it is bounded. With singular bounds at both ends of
/// `[lo, hi]` the map `y = lo + (hi − lo)·sin²(v/2)`, `v ∈ (0, π)`, removes
/// both.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Frame {
    Direct,
    SqrtLower(f64),
    SqrtUpper(f64),
    Sine { lo: f64, hi: f64 },
}

impl Frame {
    pub fn for_set(d: &FeasibleSet) -> Frame {
        match (d.singular_lower, d.singular_upper) {
            (true, true) if d.lower.is_finite() && d.upper.is_finite() => Frame::Sine { lo: d.lower, hi: d.upper },
            (true, _) => Frame::SqrtLower(d.lower),
            (false, true) => Frame::SqrtUpper(d.upper),
            (false, false) => Frame::Direct,
        }
    }

    #[inline]
    pub fn to_y(self, v: f64) -> f64 {
        match self {
            Frame::Direct => v,
            Frame::SqrtLower(b) => b + v * v,
            Frame::SqrtUpper(b) => b - v * v,
            Frame::Sine { lo, hi } => {
                if v <= std::f64::consts::FRAC_PI_2 {
                    lo + (hi - lo) * (0.5 * v).sin().powi(2)
                } else {
                    hi - (hi - lo) * (0.5 * v).cos().powi(2)
                }
            }
        }
    }

    pub fn from_y(self, y: f64) -> f64 {
        match self {
            Frame::Direct => y,
            Frame::SqrtLower(b) => (y - b).max(0.0).sqrt(),
            Frame::SqrtUpper(b) => (b - y).max(0.0).sqrt(),
            Frame::Sine { lo, hi } => 2.0 * ((y - lo) / (hi - lo)).clamp(0.0, 1.0).sqrt().asin(),
        }
    }

    #[inline]
    pub fn log_jacobian(self, v: f64) -> f64 {
        match self {
            Frame::Direct => 0.0,
            Frame::SqrtLower(_) | Frame::SqrtUpper(_) => (2.0 * v).ln(),
            Frame::Sine { lo, hi } => (0.5 * (hi - lo) * v.sin()).ln(),
        }
    }

    /// Open domain of `v`.
    pub fn domain(self, d: &FeasibleSet) -> (f64, f64) {
        match self {
            Frame::Direct => (d.lower, d.upper),
            Frame::SqrtLower(b) => (0.0, if d.upper.is_finite() { (d.upper - b).sqrt() } else { f64::INFINITY }),
            Frame::SqrtUpper(b) => (0.0, if d.lower.is_finite() { (b - d.lower).sqrt() } else { f64::INFINITY }),
            Frame::Sine { .. } => (0.0, std::f64::consts::PI),
        }
    }
}

/// Calibrated Milstein bridge for one point: the maximum, the truncation
/// interval and (optionally) the normalising constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MilsteinBridge {
    pub x_left: f64,
    pub x_right: f64,
    pub dt_k: f64,
    pub dt_plus: f64,
    pub feasible: FeasibleSet,
    pub frame: Frame,
    /// Truncation interval in frame coordinates.
    pub v_lo: f64,
    pub v_hi: f64,
    /// Log of the maximum of the frame density (the rectangle height).
    pub log_d_max: f64,
    pub argmax: f64,
    /// Log normalising constant; `0` when not normalised.
    pub log_norm_const: f64,
    pub normalized: bool,
}

impl MilsteinBridge {
    /// Truncation interval in state coordinates.
    pub fn interval(&self) -> (f64, f64) {
        let a = self.frame.to_y(self.v_lo);
        let b = self.frame.to_y(self.v_hi);
        (a.min(b), a.max(b))
    }

    /// Probability that one rectangle draw is accepted, `Z / (d_max·|I|)` in
    /// frame coordinates. Only meaningful when normalised.
    pub fn expected_acceptance(&self) -> f64 {
        (self.log_norm_const - self.log_d_max).exp() / (self.v_hi - self.v_lo)
    }

    pub fn unnorm_logdensity<M: DiffusionModel + ?Sized>(&self, model: &M, p: &M::Params, y: f64) -> f64 {
        self.target(model, p).logf(y)
    }

    /// Unnormalised log-density in frame coordinates (including the
    /// Jacobian); `-inf` outside the frame domain.
    pub fn frame_logdensity<M: DiffusionModel + ?Sized>(&self, model: &M, p: &M::Params, v: f64) -> f64 {
        let (lo, hi) = self.frame.domain(&self.feasible);
        let target = self.target(model, p);
        FramedTarget { target: &target, frame: self.frame, lo, hi }.g(v)
    }

    /// Proposal log-density of `y` (unnormalised when `normalized` is false).
    pub fn log_q<M: DiffusionModel + ?Sized>(&self, model: &M, p: &M::Params, y: f64) -> f64 {
        self.unnorm_logdensity(model, p, y) - self.log_norm_const
    }

    fn target<'a, M: DiffusionModel + ?Sized>(&self, model: &'a M, p: &'a M::Params) -> BridgeTarget<'a, M> {
        BridgeTarget {
            model,
            p,
            c_left: model.coefficients(self.x_left, p),
            x_left: self.x_left,
            x_right: self.x_right,
            dt_k: self.dt_k,
            dt_plus: self.dt_plus,
            feasible: self.feasible,
        }
    }

    /// Rejection sampling from the rectangle `I × (0, d_max)`: a uniform
    /// `u₁ ∈ I` is accepted when the density at `u₁` is at least `u₂`.
    /// Returns the point, its proposal log-density and the number of tries.
    pub fn sample<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        p: &M::Params,
        cap: usize,
        rng: &mut R,
    ) -> Result<(f64, f64, usize), Fallback> {
        let target = self.target(model, p);
        let width = self.v_hi - self.v_lo;
        for tries in 1..=cap {
            let v = self.v_lo + width * rng.random::<f64>();
            let u: f64 = rng.random();
            let y = self.frame.to_y(v);
            let lf = target.logf(y);
            if lf == f64::NEG_INFINITY {
                continue;
            }
            let g = lf + self.frame.log_jacobian(v);
            if self.log_d_max + u.ln() <= g {
                return Ok((y, lf - self.log_norm_const, tries));
            }
        }
        Err(Fallback::RejectionCap)
    }
}

/// Maximum (Brent) of `f` on `[a, b]`, never evaluating the endpoints.
fn brent_max<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, rel_tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let abs_tol = 1e-12 * (b - a);
    let (mut a, mut b) = (a, b);
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = -f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol = rel_tol * x.abs() + abs_tol;
        let tol2 = 2.0 * tol;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol && fx.is_finite() && fw.is_finite() && fv.is_finite() {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut pp = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                pp = -pp;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if pp.abs() < (0.5 * q * e_old).abs() && pp > q * (a - x) && pp < q * (b - x) {
                d = pp / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol } else { -tol };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol { x + d } else { x + tol.copysign(d) };
        let fu = -f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx)
}

/// Frame-coordinate log-density on an open domain.
struct FramedTarget<'t, 'a, M: DiffusionModel + ?Sized> {
    target: &'t BridgeTarget<'a, M>,
    frame: Frame,
    lo: f64,
    hi: f64,
}

impl<M: DiffusionModel + ?Sized> FramedTarget<'_, '_, M> {
    #[inline]
    fn g(&self, v: f64) -> f64 {
        if !(v > self.lo && v < self.hi) {
            return f64::NEG_INFINITY;
        }
        let lf = self.target.logf(self.frame.to_y(v));
        if lf == f64::NEG_INFINITY {
            lf
        } else {
            lf + self.frame.log_jacobian(v)
        }
    }

    /// Best of `n` interior scan points on `[a, b]`: (index, value, point, spacing).
    fn scan(&self, a: f64, b: f64, n: usize) -> (usize, f64, f64, f64) {
        let h = (b - a) / n as f64;
        let mut best = (0, f64::NEG_INFINITY, a + 0.5 * h);
        for i in 0..n {
            let v = a + (i as f64 + 0.5) * h;
            let g = self.g(v);
            if g > best.1 {
                best = (i, g, v);
            }
        }
        (best.0, best.1, best.2, h)
    }

    /// Scan of `[a, b]` refined by Brent around the best point when it
    /// reaches `floor`.
    fn maximize(&self, a: f64, b: f64, n: usize, floor: f64) -> Option<(f64, f64)> {
        let (_, g, v, h) = self.scan(a, b, n);
        if g == f64::NEG_INFINITY {
            return None;
        }
        if g < floor {
            return Some((v, g));
        }
        let (x, gx) = brent_max(|t| self.g(t), (v - h).max(a), (v + h).min(b), 1e-8);
        Some(if gx >= g { (x, gx) } else { (v, g) })
    }

    /// Value just inside a finite domain end.
    fn end_value(&self, end: f64, scale: f64) -> f64 {
        let eps = 1e-6 * scale;
        if end == self.lo {
            self.g(end + eps)
        } else {
            self.g(end - eps)
        }
    }

    /// Outermost point in direction `dir` from `start` where the log-density
    /// is still at least `threshold` (to bisection accuracy).
    fn walk(&self, start: f64, dir: f64, h: f64, threshold: f64, scale: f64) -> f64 {
        let limit = if dir > 0.0 { self.hi } else { self.lo };
        let bisect = |mut inside: f64, mut outside: f64| {
            for _ in 0..30 {
                let mid = 0.5 * (inside + outside);
                if self.g(mid) >= threshold {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            outside
        };
        let mut inside = start;
        let mut step = h;
        for _ in 0..2000 {
            let v = start + dir * step;
            if (dir > 0.0 && v >= limit) || (dir < 0.0 && v <= limit) {
                return if self.end_value(limit, scale) >= threshold { limit } else { bisect(inside, limit) };
            }
            if self.g(v) < threshold {
                return bisect(inside, v);
            }
            inside = v;
            step *= 2.0;
        }
        inside
    }
}

/// Calibrates the Milstein bridge for one point between `x_left` (at `t_k`)
/// and `x_right` (at `t_k + dt_k + dt_plus`).
#[allow(clippy::too_many_arguments)]
pub fn mb_milstein_calibrate<M: DiffusionModel + ?Sized>(
    model: &M,
    p: &M::Params,
    x_left: f64,
    x_right: f64,
    dt_k: f64,
    dt_plus: f64,
    normalize: bool,
    cfg: &BridgeConfig,
) -> Result<MilsteinBridge, Fallback> {
    let target = BridgeTarget::new(model, p, x_left, x_right, dt_k, dt_plus);
    let d = target.feasible;
    if d.is_empty() {
        return Err(Fallback::EmptyFeasibleSet);
    }
    let frame = Frame::for_set(&d);
    let (dom_lo, dom_hi) = frame.domain(&d);
    let ft = FramedTarget { target: &target, frame, lo: dom_lo, hi: dom_hi };
    let n = cfg.scan_points.max(3);

    // Initial window: Euler-bridge mean ± 12 s.d., clipped to D.
    let span = dt_k + dt_plus;
    let mean = x_left + (x_right - x_left) * dt_k / span;
    let mut sd = (dt_plus / span * dt_k).sqrt() * target.c_left.sigma.abs();
    if !(sd > 0.0) {
        sd = 1e-8 * x_left.abs().max(1.0);
    }
    let mut w_lo = (mean - 12.0 * sd).max(d.lower);
    let mut w_hi = (mean + 12.0 * sd).min(d.upper);
    if !(w_hi > w_lo) {
        if mean < d.lower {
            w_lo = d.lower;
            w_hi = (d.lower + 24.0 * sd).min(d.upper);
        } else {
            w_hi = d.upper;
            w_lo = (d.upper - 24.0 * sd).max(d.lower);
        }
    }
    let (fa, fb) = (frame.from_y(w_lo), frame.from_y(w_hi));
    let (mut s_lo, mut s_hi) = (fa.min(fb).max(dom_lo), fa.max(fb).min(dom_hi));
    if !(s_hi > s_lo) {
        return Err(Fallback::NoMass);
    }

    // Widen the window while the best scan point sits on an inner edge.
    let (mut best_i, mut best_g, _, mut h) = ft.scan(s_lo, s_hi, n);
    for _ in 0..60 {
        let at_lo = best_i == 0 && s_lo > dom_lo;
        let at_hi = best_i == n - 1 && s_hi < dom_hi;
        let nothing = best_g == f64::NEG_INFINITY;
        if !(at_lo || at_hi || nothing) {
            break;
        }
        let width = s_hi - s_lo;
        if at_hi || nothing {
            s_hi = (s_hi + width).min(dom_hi);
        }
        if at_lo || nothing {
            s_lo = (s_lo - width).max(dom_lo);
        }
        (best_i, best_g, _, h) = ft.scan(s_lo, s_hi, n);
    }

    // Candidate maxima: the window, the gaps to finite domain ends, and the
    // ends themselves (finite in frame coordinates).
    let scale = s_hi - s_lo;
    let gap_points = (n / 4).max(3);
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(5);
    if let Some(c) = ft.maximize(s_lo, s_hi, n, f64::NEG_INFINITY) {
        candidates.push(c);
    }
    let floor = candidates.first().map_or(f64::NEG_INFINITY, |c| c.1);
    if dom_lo.is_finite() {
        if s_lo > dom_lo {
            candidates.extend(ft.maximize(dom_lo, s_lo, gap_points, floor));
        }
        candidates.push((dom_lo, ft.end_value(dom_lo, scale)));
    }
    if dom_hi.is_finite() {
        if s_hi < dom_hi {
            candidates.extend(ft.maximize(s_hi, dom_hi, gap_points, floor));
        }
        candidates.push((dom_hi, ft.end_value(dom_hi, scale)));
    }
    let (v_star, log_d_max) = candidates
        .iter()
        .copied()
        .filter(|c| c.1.is_finite())
        .fold((f64::NAN, f64::NEG_INFINITY), |a, c| if c.1 > a.1 { c } else { a });
    if log_d_max == f64::NEG_INFINITY {
        return Err(Fallback::NoMass);
    }

    // Truncation interval: hull of the walks from the outermost candidates
    // above the threshold.
    let threshold = log_d_max + cfg.truncation.ln();
    let above = candidates.iter().filter(|c| c.1 >= threshold);
    let left = above.clone().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let right = above.map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let v_lo = if left == dom_lo { dom_lo } else { ft.walk(left, -1.0, h, threshold, scale) };
    let v_hi = if right == dom_hi { dom_hi } else { ft.walk(right, 1.0, h, threshold, scale) };

    let normalized = normalize || cfg.always_normalize;
    let log_norm_const = if normalized {
        let integrand = |v: f64| {
            let g = ft.g(v);
            if g == f64::NEG_INFINITY {
                0.0
            } else {
                (g - log_d_max).exp()
            }
        };
        let tol = cfg.quad_tolerance * (v_hi - v_lo).min(h * n as f64);
        let mut area = 0.0;
        let mut a = v_lo;
        let mut breaks: Vec<f64> = candidates.iter().map(|c| c.0).filter(|&v| v > v_lo && v < v_hi).collect();
        breaks.sort_by(f64::total_cmp);
        breaks.push(v_hi);
        for b in breaks {
            area += adaptive_gauss_legendre(integrand, a, b, tol, 40);
            a = b;
        }
        if !(area > 0.0) || !area.is_finite() {
            return Err(Fallback::NoMass);
        }
        log_d_max + area.ln()
    } else {
        0.0
    };

    Ok(MilsteinBridge {
        x_left,
        x_right,
        dt_k,
        dt_plus,
        feasible: d,
        frame,
        v_lo,
        v_hi,
        log_d_max,
        argmax: frame.to_y(v_star),
        log_norm_const,
        normalized,
    })
}

/// One Milstein bridge draw: the point and its proposal log-density.
pub fn mb_milstein_sample<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    calibration: &MilsteinBridge,
    model: &M,
    p: &M::Params,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<(f64, f64), Fallback> {
    calibration.sample(model, p, cfg.rejection_cap, rng).map(|(y, lq, _)| (y, lq))
}

// ---------------------------------------------------------------------------
// Segment orchestration

/// Proposes the interior of `path[left..=right]` (both ends held fixed) and
/// evaluates the forward density of the proposal and the reverse density of
/// the current interior under the same law.
#[allow(clippy::too_many_arguments)]
pub fn propose_segment<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    combo: MethodCombo,
    model: &M,
    p: &M::Params,
    path: &AugmentedPath,
    left: usize,
    right: usize,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<SegmentProposal, ProposalFailure> {
    debug_assert!(right > left + 1);
    let times = &path.grid().times()[left..=right];
    let values = path.values();
    let x_left = values[left];
    let x_right = values[right];
    let current = &values[left + 1..right];
    match (combo.proposal_strategy, combo.proposal_scheme) {
        (ProposalStrategy::LeftConditioned, scheme) => {
            lc_propose(model, scheme, p, times, x_left, current, cfg, rng)
        }
        (ProposalStrategy::ModifiedBridge, Scheme::Euler) => {
            mb_euler_segment(model, p, times, x_left, x_right, current, cfg, rng)
        }
        (ProposalStrategy::ModifiedBridge, Scheme::Milstein) => {
            mb_milstein_segment(model, p, times, x_left, x_right, current, cfg, rng)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mb_euler_segment<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    p: &M::Params,
    times: &[f64],
    x_left: f64,
    x_right: f64,
    current: &[f64],
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<SegmentProposal, ProposalFailure> {
    let tau = *times.last().expect("segment");
    let mut reproposals = 0u64;
    let mut proposed = Vec::with_capacity(current.len());
    let (mut log_q_forward, mut log_q_reverse) = (0.0, 0.0);
    let (mut prev_new, mut prev_cur) = (x_left, x_left);
    for (k, &cur) in current.iter().enumerate() {
        let (t_k, t_next) = (times[k], times[k + 1]);
        let fwd = EulerBridge::new(model, p, prev_new, x_right, t_k, t_next, tau);
        let y = fwd.sample(model, cfg.reproposal_cap, &mut reproposals, rng)?;
        log_q_forward += fwd.logpdf(y);
        let rev = EulerBridge::new(model, p, prev_cur, x_right, t_k, t_next, tau);
        log_q_reverse += rev.logpdf(cur);
        proposed.push(y);
        prev_new = y;
        prev_cur = cur;
    }
    Ok(SegmentProposal {
        proposed_values: proposed,
        log_q_forward,
        log_q_reverse,
        fallback_count: 0,
        reproposal_count: reproposals,
    })
}

#[allow(clippy::too_many_arguments)]
fn mb_milstein_segment<M: DiffusionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    p: &M::Params,
    times: &[f64],
    x_left: f64,
    x_right: f64,
    current: &[f64],
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<SegmentProposal, ProposalFailure> {
    let tau = *times.last().expect("segment");
    let mut reproposals = 0u64;
    let mut fallbacks = 0u64;
    let mut proposed = Vec::with_capacity(current.len());
    let (mut log_q_forward, mut log_q_reverse) = (0.0, 0.0);
    let (mut prev_new, mut prev_cur) = (x_left, x_left);
    for (k, &cur) in current.iter().enumerate() {
        let (t_k, t_next) = (times[k], times[k + 1]);
        let (dt_k, dt_plus) = (t_next - t_k, tau - t_next);
        // The first point's left neighbour is fixed, so forward and reverse
        // share one calibration and its constant cancels.
        let first = k == 0;
        let fwd = mb_milstein_calibrate(model, p, prev_new, x_right, dt_k, dt_plus, !first, cfg);
        let fwd_point = match &fwd {
            Ok(cal) => match cal.sample(model, p, cfg.rejection_cap, rng) {
                Ok((y, lq, _)) => Some((y, lq)),
                Err(_) => None,
            },
            Err(_) => None,
        };
        let (y, lq) = match fwd_point {
            Some(v) => v,
            None => {
                fallbacks += 1;
                let eb = EulerBridge::new(model, p, prev_new, x_right, t_k, t_next, tau);
                let y = eb.sample(model, cfg.reproposal_cap, &mut reproposals, rng)?;
                (y, eb.logpdf(y))
            }
        };
        log_q_forward += lq;
        let rev = if first {
            fwd
        } else {
            mb_milstein_calibrate(model, p, prev_cur, x_right, dt_k, dt_plus, true, cfg)
        };
        log_q_reverse += match rev {
            Ok(cal) => cal.log_q(model, p, cur),
            Err(_) => EulerBridge::new(model, p, prev_cur, x_right, t_k, t_next, tau).logpdf(cur),
        };
        proposed.push(y);
        prev_new = y;
        prev_cur = cur;
    }
    Ok(SegmentProposal {
        proposed_values: proposed,
        log_q_forward,
        log_q_reverse,
        fallback_count: fallbacks,
        reproposal_count: reproposals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::milstein_logdensity;
    use crate::model::{Cir, Gbm, OrnsteinUhlenbeck, OuParams};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GBM: GbmParams = GbmParams { alpha: 1.0, sigma: std::f64::consts::SQRT_2 };

    #[test]
    fn gbm_case_one_upper_bound() {
        let d = gbm_feasible_set(&GBM, 100.0, 120.0, 0.5, 0.5);
        assert_eq!(d.kind, FeasibleKind::BoundedInterval);
        assert_relative_eq!(d.upper, 240.0, max_relative = 1e-12);
        assert_relative_eq!(d.lower, 50.0, max_relative = 1e-12);
        assert!(d.singular_lower && d.singular_upper);
    }

    #[test]
    fn gbm_case_three_half_line() {
        // ½ + (α − σ²/2)Δ₊ = 0 with α = 0, σ² = 2, Δ₊ = ½
        let p = GbmParams { alpha: 0.0, sigma: std::f64::consts::SQRT_2 };
        let d = gbm_feasible_set(&p, 100.0, 120.0, 0.1, 0.5);
        assert_eq!(d.kind, FeasibleKind::HalfLine);
        assert_relative_eq!(d.lower, 100.0 * (0.5 - 0.1));
    }

    #[test]
    fn gbm_case_two_and_negative_first_bound() {
        let p = GbmParams { alpha: 0.0, sigma: 2.0 };
        let d = gbm_feasible_set(&p, 100.0, 120.0, 0.5, 0.5);
        assert_eq!(d.kind, FeasibleKind::HalfLine);
        assert_eq!(d.lower, 0.0);
        assert!(!d.singular_lower);
    }

    #[test]
    fn gbm_empty_feasible_set() {
        let d = gbm_feasible_set(&GBM, 100.0, 10.0, 0.01, 0.01);
        assert!(d.is_empty());
    }

    #[test]
    fn cir_bounds() {
        let p = CirParams { alpha: 1.0, beta: 1.0, sigma: 0.5 };
        let d = cir_feasible_set(&p, 3.0, 0.0001, 0.01, 0.01);
        let l_right: f64 = 1.0 - (0.0001 / 0.01 + 0.0625) / 1.0;
        assert_relative_eq!(d.lower, l_right.max(0.0));
        let d = cir_feasible_set(&p, 5.0, 5.0, 0.5, 0.01);
        assert_relative_eq!(d.lower, 0.0);
        let d = cir_feasible_set(&p, 0.001, 5.0, 0.5, 0.5);
        assert_relative_eq!(d.lower, (1.0 * (1.0 - 0.001) - 0.0625) * 0.5, max_relative = 1e-12);
        assert!(d.singular_lower);
        assert_eq!(Cir::full().bridge_feasible_set(&p, 0.001, 5.0, 0.5, 0.5), d);
    }

    #[test]
    fn unnorm_density_is_sum_of_factors() {
        let y = 104.0;
        let v = mb_milstein_unnorm_logdensity(&Gbm, &GBM, y, 100.0, 110.0, 0.01, 0.01);
        let a = milstein_logdensity(&Gbm, &GBM, 100.0, y, 0.01).unwrap();
        let b = milstein_logdensity(&Gbm, &GBM, y, 110.0, 0.01).unwrap();
        assert_relative_eq!(v, a + b, max_relative = 1e-12);
        assert_eq!(mb_milstein_unnorm_logdensity(&Gbm, &GBM, 20.0, 100.0, 110.0, 0.01, 0.01), f64::NEG_INFINITY);
    }

    #[test]
    fn constant_diffusion_bridge_is_unfrozen_euler_product() {
        let p = OuParams { alpha: 1.0, beta: 0.0, sigma: 0.4 };
        let ou = OrnsteinUhlenbeck;
        for &y in &[-0.3, 0.0, 0.2, 0.5] {
            let v = mb_milstein_unnorm_logdensity(&ou, &p, y, 0.1, 0.3, 0.05, 0.07);
            let e = crate::density::euler_logdensity(&ou, &p, 0.1, y, 0.05).unwrap()
                + crate::density::euler_logdensity(&ou, &p, y, 0.3, 0.07).unwrap();
            assert_relative_eq!(v, e, max_relative = 1e-12);
        }
    }

    #[test]
    fn euler_bridge_midpoint() {
        let sigma2 = 2.0;
        let p = GbmParams { alpha: 1.0, sigma: f64::sqrt(sigma2) };
        let b = EulerBridge::new(&Gbm, &p, 100.0, 120.0, 0.0, 0.1, 0.2);
        assert_relative_eq!(b.mean, 110.0);
        assert_relative_eq!(b.var, 0.5 * sigma2 * 100.0 * 100.0 * 0.1, max_relative = 1e-14);
        let end = EulerBridge::new(&Gbm, &p, 100.0, 120.0, 0.1, 0.2, 0.2);
        assert_eq!(end.var, 0.0);
        assert_eq!(end.mean, 120.0);
        assert_eq!(end.logpdf(120.0), f64::INFINITY);
    }

    #[test]
    fn calibration_truncation_and_sampling_stay_inside() {
        let cfg = BridgeConfig::default();
        let cal = mb_milstein_calibrate(&Gbm, &GBM, 100.0, 105.0, 0.004, 0.012, true, &cfg).unwrap();
        let (lo, hi) = cal.interval();
        assert!(lo < cal.argmax && cal.argmax < hi);
        let ends = [lo, hi].map(|y| cal.unnorm_logdensity(&Gbm, &GBM, y));
        for e in ends {
            assert!(e <= cal.log_d_max + (1e-19f64).ln() || e == f64::NEG_INFINITY || lo == cal.feasible.lower);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (y, lq) = mb_milstein_sample(&cal, &Gbm, &GBM, &cfg, &mut rng).unwrap();
            assert!(y >= lo && y <= hi);
            assert!(lq.is_finite());
        }
    }

    #[test]
    fn empty_set_signals_fallback() {
        let cfg = BridgeConfig::default();
        let r = mb_milstein_calibrate(&Gbm, &GBM, 100.0, 10.0, 0.01, 0.01, true, &cfg);
        assert_eq!(r.unwrap_err(), Fallback::EmptyFeasibleSet);
    }

    #[test]
    fn singular_bounds_select_frame() {
        // σ²Δt large: the first factor piles up at its support bound.
        let p = GbmParams { alpha: 0.0, sigma: 4.0 };
        let cfg = BridgeConfig::default();
        let cal = mb_milstein_calibrate(&Gbm, &p, 100.0, 60.0, 0.05, 0.05, true, &cfg).unwrap();
        assert!(matches!(cal.frame, Frame::Sine { .. }), "{cal:?}");
        assert!(cal.log_d_max.is_finite());
        // the spike at the lower bound is inside the truncation interval
        assert_eq!(cal.v_lo, 0.0);
        let cir = Cir::with_known_alpha(1.0);
        let pc = CirParams { alpha: 1.0, beta: 1.0, sigma: 0.5 };
        let cal = mb_milstein_calibrate(&cir, &pc, 0.001, 0.001, 0.5, 0.5, true, &cfg).unwrap();
        assert!(matches!(cal.frame, Frame::SqrtLower(_)), "{cal:?}");
    }

    #[test]
    fn lc_m2_ratio_reduces_to_last_transition() {
        let obs = [
            crate::scheme::Observation { time: 0.0, value: 100.0 },
            crate::scheme::Observation { time: 0.02, value: 104.0 },
        ];
        let path = AugmentedPath::from_observations(&obs, 2).unwrap();
        let combo = MethodCombo::new(ProposalStrategy::LeftConditioned, Scheme::Euler, Scheme::Euler);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = BridgeConfig::default();
        let prop = propose_segment(combo, &Gbm, &GBM, &path, 0, 2, &cfg, &mut rng).unwrap();
        let y = prop.proposed_values[0];
        let cur = path.values()[1];
        let ll = |mid: f64| {
            crate::density::euler_logdensity(&Gbm, &GBM, 100.0, mid, 0.01).unwrap()
                + crate::density::euler_logdensity(&Gbm, &GBM, mid, 104.0, 0.01).unwrap()
        };
        let log_ratio = ll(y) - ll(cur) + prop.log_q_reverse - prop.log_q_forward;
        let reduced = crate::density::euler_logdensity(&Gbm, &GBM, y, 104.0, 0.01).unwrap()
            - crate::density::euler_logdensity(&Gbm, &GBM, cur, 104.0, 0.01).unwrap();
        assert_relative_eq!(log_ratio, reduced, epsilon = 1e-10);
    }

    #[test]
    fn lc_noiseless_is_deterministic_path() {
        let p = GbmParams { alpha: 1.0, sigma: 0.0 };
        let times = [0.0, 0.1, 0.2, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BridgeConfig::default();
        let prop = lc_propose(&Gbm, Scheme::Euler, &p, &times, 1.0, &[1.0, 1.0], &cfg, &mut rng).unwrap();
        assert_relative_eq!(prop.proposed_values[0], 1.1);
        assert_relative_eq!(prop.proposed_values[1], 1.21);
    }
}
