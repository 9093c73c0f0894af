//! Two-step Gibbs sampler: a joint random-walk update of the parameters given
//! the augmented path, then block-wise Metropolis–Hastings updates of the
//! imputed points given the parameters.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::{propose_segment, BridgeConfig};
use crate::density::{path_loglikelihood, segment_loglik};
use crate::error::{Error, Result};
use crate::model::{DiffusionModel, PriorSpec};
use crate::output::fmt17;
use crate::scheme::{AugmentedPath, Observation, Scheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStrategy {
    LeftConditioned,
    ModifiedBridge,
}

impl ProposalStrategy {
    pub fn label(self) -> &'static str {
        match self {
            ProposalStrategy::LeftConditioned => "LC",
            ProposalStrategy::ModifiedBridge => "MB",
        }
    }
}

impl FromStr for ProposalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lc" | "left_conditioned" => Ok(ProposalStrategy::LeftConditioned),
            "mb" | "modified_bridge" => Ok(ProposalStrategy::ModifiedBridge),
            _ => Err(Error::Config(format!("unknown proposal method `{s}`"))),
        }
    }
}

/// Proposal method, proposal density and likelihood density of one
/// estimation procedure. Serialised as its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodCombo {
    pub proposal_strategy: ProposalStrategy,
    pub proposal_scheme: Scheme,
    pub likelihood_scheme: Scheme,
}

impl MethodCombo {
    pub const fn new(proposal_strategy: ProposalStrategy, proposal_scheme: Scheme, likelihood_scheme: Scheme) -> Self {
        Self { proposal_strategy, proposal_scheme, likelihood_scheme }
    }

    /// All eight procedures, LC before MB, then by proposal and likelihood.
    pub const ALL: [MethodCombo; 8] = {
        use ProposalStrategy::*;
        use Scheme::*;
        [
            MethodCombo::new(LeftConditioned, Euler, Euler),
            MethodCombo::new(LeftConditioned, Euler, Milstein),
            MethodCombo::new(LeftConditioned, Milstein, Euler),
            MethodCombo::new(LeftConditioned, Milstein, Milstein),
            MethodCombo::new(ModifiedBridge, Euler, Euler),
            MethodCombo::new(ModifiedBridge, Euler, Milstein),
            MethodCombo::new(ModifiedBridge, Milstein, Euler),
            MethodCombo::new(ModifiedBridge, Milstein, Milstein),
        ]
    };

    /// `LC/Euler/Milstein` style label.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            self.proposal_strategy.label(),
            title(self.proposal_scheme),
            title(self.likelihood_scheme)
        )
    }
}

fn title(s: Scheme) -> &'static str {
    match s {
        Scheme::Euler => "Euler",
        Scheme::Milstein => "Milstein",
    }
}

impl fmt::Display for MethodCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for MethodCombo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for MethodCombo {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for MethodCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').map(str::trim).collect();
        match parts.as_slice() {
            [a, b, c] => Ok(MethodCombo::new(a.parse()?, b.parse()?, c.parse()?)),
            _ => Err(Error::Config(format!("combo `{s}` is not of the form METHOD/PROPOSAL/LIKELIHOOD"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in_fraction: f64,
    /// Subintervals per observation gap; `m − 1` imputed points per gap.
    pub m: usize,
    /// Poisson mean of the random block sizes.
    pub lambda: f64,
    /// Random-walk variances γ², one per parameter.
    pub rw_variances: Vec<f64>,
    pub seed: u64,
    pub bridge: BridgeConfig,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            burn_in_fraction: 0.1,
            m: 2,
            lambda: 5.0,
            rw_variances: vec![0.25, 0.25],
            seed: 0,
            bridge: BridgeConfig::default(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self, n_params: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config(format!("burn-in fraction {} not in [0, 1)", self.burn_in_fraction)));
        }
        if self.rw_variances.len() != n_params {
            return Err(Error::Config(format!(
                "{} random-walk variances given for {n_params} parameters",
                self.rw_variances.len()
            )));
        }
        if self.rw_variances.iter().any(|&g| !(g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("random-walk variances must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Named RNG substreams derived from one chain seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    ParamProposal = 1,
    BlockSizes = 2,
    PathProposal = 3,
    Acceptance = 4,
    PriorInit = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Milstein bridge points drawn from the Euler bridge instead.
    pub fallbacks: u64,
    /// Redraws of points that left the state space.
    pub reproposals: u64,
    /// Blocks rejected because no valid proposal was found.
    pub proposal_failures: u64,
}

impl Counters {
    fn add(&mut self, other: Counters) {
        self.fallbacks += other.fallbacks;
        self.reproposals += other.reproposals;
        self.proposal_failures += other.proposal_failures;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub combo: MethodCombo,
    pub m: usize,
    pub seed: u64,
    pub param_names: Vec<String>,
    pub initial_theta: Vec<f64>,
    /// One row per iteration.
    pub samples: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    pub param_accepted: u64,
    pub path_accepted: u64,
    pub path_proposals: u64,
    /// Largest |log acceptance ratio| over proposed path blocks.
    pub max_abs_path_log_ratio: f64,
    pub counters: Counters,
    pub wall_time_s: f64,
}

impl ChainResult {
    pub fn iterations(&self) -> usize {
        self.samples.len()
    }

    pub fn param_accept_rate(&self) -> f64 {
        self.param_accepted as f64 / self.samples.len() as f64
    }

    /// `None` when no block ever proposed an imputed point (m = 1).
    pub fn path_accept_rate(&self) -> Option<f64> {
        (self.path_proposals > 0).then(|| self.path_accepted as f64 / self.path_proposals as f64)
    }

    /// Samples after discarding the first `⌊fraction · L⌋` iterations.
    pub fn post_burn_in(&self, fraction: f64) -> &[Vec<f64>] {
        let l = (fraction * self.samples.len() as f64).floor() as usize;
        &self.samples[l.min(self.samples.len())..]
    }

    pub fn column(&self, j: usize, burn_in_fraction: f64) -> Vec<f64> {
        self.post_burn_in(burn_in_fraction).iter().map(|r| r[j]).collect()
    }

    pub fn summary(&self) -> ChainSummary {
        ChainSummary {
            combo: self.combo.label(),
            m: self.m,
            seed: self.seed,
            iterations: self.iterations(),
            param_accept_rate: self.param_accept_rate(),
            path_accept_rate: self.path_accept_rate(),
            counters: self.counters,
            wall_time_s: self.wall_time_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub combo: String,
    pub m: usize,
    pub seed: u64,
    pub iterations: usize,
    pub param_accept_rate: f64,
    pub path_accept_rate: Option<f64>,
    pub counters: Counters,
    pub wall_time_s: f64,
}

/// Writes `iteration,<params>,log_posterior`.
pub fn write_chain_csv<W: Write>(mut w: W, chain: &ChainResult) -> std::io::Result<()> {
    writeln!(w, "iteration,{},log_posterior", chain.param_names.join(","))?;
    for (i, (row, lp)) in chain.samples.iter().zip(&chain.log_posterior).enumerate() {
        write!(w, "{}", i + 1)?;
        for v in row {
            write!(w, ",{}", fmt17(*v))?;
        }
        writeln!(w, ",{}", fmt17(*lp))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parameter update

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStep {
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub accepted: bool,
}

/// One joint random-walk MH step. Real components move by `N(θ_j, γ_j²)`,
/// positive ones by `logN(log θ_j, γ_j²)`, which contributes the Jacobian
/// `θ*_j/θ_j`. `loglik` gives `-inf` for infeasible parameters; such
/// proposals are rejected.
#[allow(clippy::too_many_arguments)]
pub fn parameter_update<F, R1, R2>(
    theta: &[f64],
    current_loglik: f64,
    positive_mask: &[bool],
    rw_variances: &[f64],
    prior: &PriorSpec,
    mut loglik: F,
    proposal_rng: &mut R1,
    accept_rng: &mut R2,
) -> ParamStep
where
    F: FnMut(&[f64]) -> f64,
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let mut proposal = Vec::with_capacity(theta.len());
    let mut log_jacobian = 0.0;
    for ((&t, &pos), &g2) in theta.iter().zip(positive_mask).zip(rw_variances) {
        let z: f64 = proposal_rng.sample(StandardNormal);
        let step = g2.sqrt() * z;
        if pos {
            proposal.push(t * step.exp());
            log_jacobian += step;
        } else {
            proposal.push(t + step);
        }
    }
    let u: f64 = accept_rng.random();
    let prior_new = prior.logdensity(&proposal);
    let reject = ParamStep { theta: theta.to_vec(), loglik: current_loglik, accepted: false };
    if prior_new == f64::NEG_INFINITY {
        return reject;
    }
    let ll_new = loglik(&proposal);
    if ll_new == f64::NEG_INFINITY || ll_new.is_nan() {
        return reject;
    }
    let log_ratio = ll_new - current_loglik + prior_new - prior.logdensity(theta) + log_jacobian;
    if u.ln() < log_ratio {
        ParamStep { theta: proposal, loglik: ll_new, accepted: true }
    } else {
        reject
    }
}

// ---------------------------------------------------------------------------
// Path update

/// Random block boundaries over point indices `0..=n`: `c_0 = 0` and
/// `c_j = min(c_{j−1} + Z_j, n)` with `Z_j ~ Po(λ)`. Zero-length increments
/// are dropped. Each block `(a, b)` keeps `a` and `b` fixed.
pub fn choose_update_blocks<R: Rng + ?Sized>(n: usize, lambda: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let poisson = Poisson::new(lambda).expect("lambda > 0");
    let mut blocks = Vec::with_capacity(n / lambda.max(1.0) as usize + 2);
    let mut c = 0usize;
    while c < n {
        let z: f64 = poisson.sample(rng);
        let next = if z >= (n - c) as f64 { n } else { c + z as usize };
        if next > c {
            blocks.push((c, next));
        }
        c = next;
    }
    blocks
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PathStepStats {
    pub accepted: u64,
    pub proposed: u64,
    pub max_abs_log_ratio: f64,
    pub counters: Counters,
}

/// Updates the imputed points block by block, left to right. Within a block
/// each observation-to-observation sub-segment gets its own proposal; the
/// log ratios are summed and the block is accepted or rejected as a whole.
#[allow(clippy::too_many_arguments)]
pub fn path_update<M: DiffusionModel + ?Sized, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    combo: MethodCombo,
    model: &M,
    p: &M::Params,
    path: &mut AugmentedPath,
    blocks: &[(usize, usize)],
    cfg: &BridgeConfig,
    proposal_rng: &mut R1,
    accept_rng: &mut R2,
) -> PathStepStats {
    let mut stats = PathStepStats::default();
    let mut sub = Vec::new();
    let mut staged: Vec<(usize, Vec<f64>)> = Vec::new();
    for &(a, b) in blocks {
        sub.clear();
        let mut l = a;
        for k in a + 1..=b {
            if k == b || path.grid().is_observed(k) {
                if k > l + 1 {
                    sub.push((l, k));
                }
                l = k;
            }
        }
        if sub.is_empty() {
            continue;
        }
        stats.proposed += 1;
        staged.clear();
        let mut log_ratio = 0.0;
        let mut failed = false;
        for &(l, r) in &sub {
            match propose_segment(combo, model, p, path, l, r, cfg, proposal_rng) {
                Ok(prop) => {
                    stats.counters.fallbacks += prop.fallback_count;
                    stats.counters.reproposals += prop.reproposal_count;
                    let times = &path.grid().times()[l..=r];
                    let old = segment_loglik(model, combo.likelihood_scheme, p, times, &path.values()[l..=r]);
                    let mut new_vals = Vec::with_capacity(r - l + 1);
                    new_vals.push(path.values()[l]);
                    new_vals.extend_from_slice(&prop.proposed_values);
                    new_vals.push(path.values()[r]);
                    let new = segment_loglik(model, combo.likelihood_scheme, p, times, &new_vals);
                    log_ratio += (new - old) + (prop.log_q_reverse - prop.log_q_forward);
                    staged.push((l, prop.proposed_values));
                }
                Err(f) => {
                    stats.counters.reproposals += f.reproposal_count;
                    stats.counters.proposal_failures += 1;
                    failed = true;
                    break;
                }
            }
        }
        let u: f64 = accept_rng.random();
        if failed {
            continue;
        }
        if log_ratio.is_finite() {
            stats.max_abs_log_ratio = stats.max_abs_log_ratio.max(log_ratio.abs());
        } else if log_ratio.is_nan() {
            stats.max_abs_log_ratio = f64::NAN;
        }
        if u.ln() < log_ratio {
            stats.accepted += 1;
            for (l, vals) in staged.drain(..) {
                for (i, v) in vals.into_iter().enumerate() {
                    path.set_imputed(l + 1 + i, v);
                }
            }
        }
    }
    stats
}

// ---------------------------------------------------------------------------
// Chain

/// Runs one chain. The initial θ is drawn from the prior (redrawn up to 100
/// times while the initial log-likelihood is `-inf`) and the imputed points
/// start on straight lines between observations.
pub fn run_chain<M: DiffusionModel + ?Sized>(
    combo: MethodCombo,
    model: &M,
    prior: &PriorSpec,
    observations: &[Observation],
    config: &McmcConfig,
) -> Result<ChainResult> {
    let n_params = model.param_names().len();
    config.validate(n_params)?;
    if prior.len() != n_params {
        return Err(Error::Config(format!("{} priors given for {n_params} parameters", prior.len())));
    }
    let mut path = AugmentedPath::from_observations(observations, config.m)?;
    if !path.is_valid(model) {
        return Err(Error::Parameter("observations outside the state space".into()));
    }
    let loglik = |theta: &[f64], path: &AugmentedPath| -> f64 {
        match model.params(theta) {
            Ok(p) => path_loglikelihood(model, combo.likelihood_scheme, &p, path),
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let mut init_rng = stream_rng(config.seed, Stream::PriorInit);
    let mut theta = prior.sample(&mut init_rng);
    let mut ll = loglik(&theta, &path);
    let mut draws = 1;
    while !ll.is_finite() && draws < 100 {
        theta = prior.sample(&mut init_rng);
        ll = loglik(&theta, &path);
        draws += 1;
    }
    if !ll.is_finite() {
        return Err(Error::DegenerateChain(format!("no finite initial log-likelihood after {draws} prior draws")));
    }
    let initial_theta = theta.clone();

    let mut param_rng = stream_rng(config.seed, Stream::ParamProposal);
    let mut block_rng = stream_rng(config.seed, Stream::BlockSizes);
    let mut path_rng = stream_rng(config.seed, Stream::PathProposal);
    let mut accept_rng = stream_rng(config.seed, Stream::Acceptance);

    let mask = model.positive_mask();
    let has_imputed = path.imputed_count() > 0;
    let n_last = path.len() - 1;
    let mut samples = Vec::with_capacity(config.iterations);
    let mut log_posterior = Vec::with_capacity(config.iterations);
    let mut counters = Counters::default();
    let (mut param_accepted, mut path_accepted, mut path_proposals) = (0u64, 0u64, 0u64);
    let mut max_abs = 0.0f64;

    let start = Instant::now();
    for _ in 0..config.iterations {
        let step = parameter_update(
            &theta,
            ll,
            mask,
            &config.rw_variances,
            prior,
            |t| loglik(t, &path),
            &mut param_rng,
            &mut accept_rng,
        );
        theta = step.theta;
        ll = step.loglik;
        param_accepted += step.accepted as u64;

        if has_imputed {
            let p = model.params(&theta)?;
            let blocks = choose_update_blocks(n_last, config.lambda, &mut block_rng);
            let stats =
                path_update(combo, model, &p, &mut path, &blocks, &config.bridge, &mut path_rng, &mut accept_rng);
            path_accepted += stats.accepted;
            path_proposals += stats.proposed;
            counters.add(stats.counters);
            max_abs = if stats.max_abs_log_ratio.is_nan() { f64::NAN } else { max_abs.max(stats.max_abs_log_ratio) };
            if stats.accepted > 0 {
                ll = path_loglikelihood(model, combo.likelihood_scheme, &p, &path);
            }
        }
        samples.push(theta.clone());
        log_posterior.push(ll + prior.logdensity(&theta));
    }
    let wall_time_s = start.elapsed().as_secs_f64();

    Ok(ChainResult {
        combo,
        m: config.m,
        seed: config.seed,
        param_names: model.param_names().iter().map(|s| s.to_string()).collect(),
        initial_theta,
        samples,
        log_posterior,
        param_accepted,
        path_accepted,
        path_proposals,
        max_abs_path_log_ratio: max_abs,
        counters,
        wall_time_s,
    })
}

// ---------------------------------------------------------------------------
// Point estimates

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEstimates {
    pub mean: Vec<f64>,
    pub mode: Vec<f64>,
}

/// Component-wise mean and kernel-density mode after burn-in.
pub fn point_estimates(chain: &ChainResult, burn_in_fraction: f64) -> Result<PointEstimates> {
    let rows = chain.post_burn_in(burn_in_fraction);
    if rows.len() < 100 {
        return Err(Error::DegenerateChain(format!("{} post-burn-in samples, need at least 100", rows.len())));
    }
    let p = chain.param_names.len();
    let mut mean = Vec::with_capacity(p);
    let mut mode = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        mean.push(col.iter().sum::<f64>() / col.len() as f64);
        mode.push(kde_mode(&col));
    }
    Ok(PointEstimates { mean, mode })
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < s.len() {
        s[i] + frac * (s[i + 1] - s[i])
    } else {
        s[i]
    }
}

/// Argmax of a Gaussian kernel density estimate (Silverman bandwidth) on a
/// 512-point grid spanning the samples.
pub fn kde_mode(samples: &[f64]) -> f64 {
    const GRID: usize = 512;
    const CUTOFF: f64 = 8.0;
    let s = sorted(samples);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if !(h > 0.0) {
        return quantile_sorted(&s, 0.5);
    }
    let (lo, hi) = (s[0] - 3.0 * h, s[s.len() - 1] + 3.0 * h);
    let mut best = (f64::NEG_INFINITY, lo);
    for g in 0..GRID {
        let x = lo + (hi - lo) * g as f64 / (GRID - 1) as f64;
        let a = s.partition_point(|&v| v < x - CUTOFF * h);
        let b = s.partition_point(|&v| v <= x + CUTOFF * h);
        let dens: f64 = s[a..b].iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum();
        if dens > best.0 {
            best = (dens, x);
        }
    }
    best.1
}

/// Shortest interval containing `⌈level · n⌉` of the samples.
pub fn hpd_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::DegenerateChain("no samples".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("HPD level {level} not in (0, 1)")));
    }
    let s = sorted(samples);
    let k = ((level * s.len() as f64).ceil() as usize).clamp(1, s.len());
    let mut best = (f64::INFINITY, s[0], s[0]);
    for i in 0..=s.len() - k {
        let w = s[i + k - 1] - s[i];
        if w < best.0 {
            best = (w, s[i], s[i + k - 1]);
        }
    }
    Ok((best.1, best.2))
}
