//! Simulation-study orchestration: data generation per path, one chain per
//! (path, combo, m), ML/MAP benchmarks, and CSV/JSON artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{multivariate_ess, summarize_run, write_summary_csv, ChainMetrics, SummaryRow};
use crate::error::{Error, Result};
use crate::estimate::{map_estimate_gbm, ml_estimate_gbm};
use crate::mcmc::{point_estimates, run_chain, stream_rng, write_chain_csv, ChainResult, Counters, McmcConfig, MethodCombo, PointEstimates, Stream};
use crate::model::{cir_model, Cir, CirParams, DiffusionModel, Gbm, GbmParams, PriorSpec};
use crate::output::{fmt17, fmt_opt};
use crate::scheme::{generate_observations, write_observations_csv, DataGeneration, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Gbm,
    Cir,
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gbm" => Ok(Self::Gbm),
            "cir" => Ok(Self::Cir),
            _ => Err(Error::Config(format!("unknown model `{s}` (expected gbm or cir)"))),
        }
    }
}

/// A study model with its true parameters. CIR chains estimate `(β, σ²)`
/// with α fixed at its true value.
#[derive(Clone, Copy, Debug)]
pub enum StudyModel {
    Gbm(GbmParams),
    Cir(CirParams),
}

impl StudyModel {
    /// `theta_true` is `[α, σ²]` for GBM and `[α, β, σ²]` for CIR.
    pub fn new(id: ModelId, theta_true: &[f64]) -> Result<Self> {
        match (id, theta_true) {
            (ModelId::Gbm, &[alpha, sigma2]) => Ok(Self::Gbm(Gbm.params(&[alpha, sigma2])?)),
            (ModelId::Cir, &[alpha, beta, sigma2]) => {
                if !(sigma2 > 0.0) {
                    return Err(Error::Parameter(format!("sigma2 must be strictly positive, got {sigma2}")));
                }
                Ok(Self::Cir(cir_model(alpha, beta, sigma2.sqrt())?.1))
            }
            (ModelId::Gbm, t) => Err(Error::Config(format!("GBM takes [alpha, sigma2], got {} values", t.len()))),
            (ModelId::Cir, t) => {
                Err(Error::Config(format!("CIR takes [alpha, beta, sigma2], got {} values", t.len())))
            }
        }
    }

    pub fn id(&self) -> ModelId {
        match self {
            Self::Gbm(_) => ModelId::Gbm,
            Self::Cir(_) => ModelId::Cir,
        }
    }

    fn cir_chain_model(p: &CirParams) -> Cir {
        Cir::with_known_alpha(p.alpha)
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Self::Gbm(_) => Gbm.param_names(),
            Self::Cir(p) => Self::cir_chain_model(p).param_names(),
        }
    }

    /// True value of the chain-space parameter vector.
    pub fn chain_theta_true(&self) -> Vec<f64> {
        match self {
            Self::Gbm(p) => vec![p.alpha, p.sigma2()],
            Self::Cir(p) => vec![p.beta, p.sigma2()],
        }
    }

    pub fn default_prior(&self) -> PriorSpec {
        match self {
            Self::Gbm(_) => PriorSpec::gbm_study(),
            Self::Cir(_) => PriorSpec::cir_study(),
        }
    }

    pub fn in_state_space(&self, x: f64) -> bool {
        match self {
            Self::Gbm(_) => Gbm.in_state_space(x),
            Self::Cir(_) => Cir::full().in_state_space(x),
        }
    }

    pub fn generate<R: rand::Rng + ?Sized>(
        &self,
        x0: f64,
        count: usize,
        horizon: f64,
        how: DataGeneration,
        rng: &mut R,
    ) -> Result<Vec<Observation>> {
        match self {
            Self::Gbm(p) => generate_observations(&Gbm, p, x0, count, horizon, how, rng),
            Self::Cir(p) => generate_observations(&Cir::full(), p, x0, count, horizon, how, rng),
        }
    }

    pub fn run_chain(
        &self,
        combo: MethodCombo,
        prior: &PriorSpec,
        obs: &[Observation],
        config: &McmcConfig,
    ) -> Result<ChainResult> {
        match self {
            Self::Gbm(_) => run_chain(combo, &Gbm, prior, obs, config),
            Self::Cir(p) => run_chain(combo, &Self::cir_chain_model(p), prior, obs, config),
        }
    }
}

/// Study configuration, readable from TOML. Missing fields take the values
/// of [`StudyConfig::gbm_paper`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub model: ModelId,
    /// `[α, σ²]` for GBM, `[α, β, σ²]` for CIR.
    pub theta_true: Vec<f64>,
    pub x0: f64,
    pub n_paths: usize,
    /// Observations per path, including the initial value.
    pub observations: usize,
    pub horizon: f64,
    pub combos: Vec<MethodCombo>,
    pub m_values: Vec<usize>,
    /// Chain settings; `m` and `seed` are set per chain.
    pub mcmc: McmcConfig,
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
    pub data_generation: DataGeneration,
    /// Defaults to the model's study priors.
    pub prior: Option<PriorSpec>,
    /// Dump every chain's samples under `chains/`.
    pub write_chains: bool,
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self::gbm_paper()
    }
}

impl StudyConfig {
    /// GBM study: α = 1, σ² = 2, x0 = 100, 100 paths of 50 exact
    /// observations on [0, 1], 10⁵ iterations.
    pub fn gbm_paper() -> Self {
        Self {
            model: ModelId::Gbm,
            theta_true: vec![1.0, 2.0],
            x0: 100.0,
            n_paths: 100,
            observations: 50,
            horizon: 1.0,
            combos: MethodCombo::ALL.to_vec(),
            m_values: vec![1, 2, 5],
            mcmc: McmcConfig::default(),
            output_dir: None,
            master_seed: 42,
            data_generation: DataGeneration::Exact,
            prior: None,
            write_chains: false,
            threads: None,
        }
    }

    /// CIR study with α = 1 known, β = 1, σ² = 0.25, x0 = 3; data by Euler
    /// with step 10⁻⁶.
    pub fn cir_paper() -> Self {
        Self {
            model: ModelId::Cir,
            theta_true: vec![1.0, 1.0, 0.25],
            x0: 3.0,
            data_generation: DataGeneration::FineEuler { max_step: 1e-6 },
            ..Self::gbm_paper()
        }
    }

    /// 10 paths and 2·10⁴ iterations.
    pub fn desk(mut self) -> Self {
        self.n_paths = 10;
        self.mcmc.iterations = 20_000;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn prior_spec(&self) -> Result<PriorSpec> {
        let model = StudyModel::new(self.model, &self.theta_true)?;
        match &self.prior {
            Some(p) => PriorSpec::new(p.components.clone()),
            None => Ok(model.default_prior()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = StudyModel::new(self.model, &self.theta_true)?;
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        if self.observations < 3 {
            return Err(Error::Config(format!("need at least 3 observations per path, got {}", self.observations)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !model.in_state_space(self.x0) {
            return Err(Error::Config(format!("x0 = {} outside the state space", self.x0)));
        }
        if self.combos.is_empty() || self.m_values.is_empty() {
            return Err(Error::Config("at least one combo and one m value required".into()));
        }
        if self.m_values.contains(&0) {
            return Err(Error::Config("all m values must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let n = model.param_names().len();
        self.mcmc.validate(n)?;
        if self.prior_spec()?.len() != n {
            return Err(Error::Config(format!("prior must have {n} components")));
        }
        Ok(())
    }

    pub fn path_seed(&self, path_id: usize) -> u64 {
        self.master_seed.wrapping_add(path_id as u64)
    }
}

/// Outcome of one (path, combo, m) chain. Samples are not retained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub path_id: usize,
    pub path_seed: u64,
    pub combo: MethodCombo,
    pub m: usize,
    pub iterations: usize,
    pub metrics: Option<ChainMetrics>,
    pub max_abs_path_log_ratio: Option<f64>,
    pub counters: Counters,
    pub estimates: Option<PointEstimates>,
    pub error: Option<String>,
}

impl ChainRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// One row of the long-format estimates table. Benchmark rows have no
/// combo or m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub estimator: String,
    pub combo: Option<MethodCombo>,
    pub m: Option<usize>,
    pub path_id: usize,
    pub path_seed: u64,
    pub parameter: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub path_id: usize,
    pub path_seed: u64,
    pub stage: String,
    pub combo: Option<MethodCombo>,
    pub m: Option<usize>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub path_seeds: Vec<u64>,
    pub observations: Vec<Vec<Observation>>,
    /// Ordered by path, then combo as configured, then m.
    pub chains: Vec<ChainRecord>,
    pub estimates: Vec<EstimateRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<Failure>,
    pub counters: Counters,
}

impl StudyReport {
    pub fn chains_for(&self, combo: MethodCombo, m: usize) -> impl Iterator<Item = &ChainRecord> {
        self.chains.iter().filter(move |c| c.combo == combo && c.m == m)
    }

    pub fn summary_row(&self, combo: MethodCombo, m: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.combo == combo && r.m == m)
    }

    /// Values of one estimator and parameter, ordered by path.
    pub fn estimate_values(&self, estimator: &str, combo: Option<MethodCombo>, m: Option<usize>, parameter: &str) -> Vec<f64> {
        self.estimates
            .iter()
            .filter(|e| e.estimator == estimator && e.combo == combo && e.m == m && e.parameter == parameter)
            .map(|e| e.value)
            .collect()
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_name: &'static str,
    crate_version: &'static str,
    master_seed: u64,
    path_seeds: &'a [u64],
    chains_run: usize,
    chains_failed: usize,
    counters: Counters,
    failures: &'a [Failure],
    config: &'a StudyConfig,
}

fn chain_file_name(path_id: usize, combo: MethodCombo, m: usize) -> String {
    format!("path_{path_id:03}_{}_m{m}.csv", combo.label().replace('/', "_"))
}

fn run_one(
    model: &StudyModel,
    prior: &PriorSpec,
    cfg: &StudyConfig,
    obs: &[Observation],
    (path_id, combo, m): (usize, MethodCombo, usize),
) -> Result<(ChainRecord, Option<ChainResult>)> {
    let path_seed = cfg.path_seed(path_id);
    let mcmc = McmcConfig { m, seed: path_seed, ..cfg.mcmc.clone() };
    let mut record = ChainRecord {
        path_id,
        path_seed,
        combo,
        m,
        iterations: mcmc.iterations,
        metrics: None,
        max_abs_path_log_ratio: None,
        counters: Counters::default(),
        estimates: None,
        error: None,
    };
    let chain = match model.run_chain(combo, prior, obs, &mcmc) {
        Ok(c) => c,
        Err(e) => {
            record.error = Some(e.to_string());
            return Ok((record, None));
        }
    };
    let rows = chain.post_burn_in(mcmc.burn_in_fraction);
    record.metrics = Some(ChainMetrics {
        combo,
        m,
        path_id,
        ess: multivariate_ess(rows).ok().map(|r| r.multivariate_ess),
        param_accept_rate: chain.param_accept_rate(),
        path_accept_rate: chain.path_accept_rate(),
        wall_time_s: chain.wall_time_s,
    });
    record.max_abs_path_log_ratio = (chain.path_proposals > 0).then_some(chain.max_abs_path_log_ratio);
    record.counters = chain.counters;
    match point_estimates(&chain, mcmc.burn_in_fraction) {
        Ok(p) => record.estimates = Some(p),
        Err(e) => record.error = Some(e.to_string()),
    }
    Ok((record, cfg.write_chains.then_some(chain)))
}

/// Runs the full study. Chains run in parallel; results are collected in
/// task order so every artifact except wall times is reproducible. Chain
/// failures are recorded and the study continues. Artifacts are written
/// when `output_dir` is set.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let model = StudyModel::new(config.model, &config.theta_true)?;
    let prior = config.prior_spec()?;
    let names = model.param_names();
    if let Some(dir) = &config.output_dir {
        fs::create_dir_all(dir.join("observations"))?;
        if config.write_chains {
            fs::create_dir_all(dir.join("chains"))?;
        }
    }

    let path_seeds: Vec<u64> = (0..config.n_paths).map(|i| config.path_seed(i)).collect();
    let observations = path_seeds
        .iter()
        .map(|&seed| {
            let mut rng = stream_rng(seed, Stream::Data);
            model.generate(config.x0, config.observations, config.horizon, config.data_generation, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tasks = Vec::new();
    for path_id in 0..config.n_paths {
        for &combo in &config.combos {
            for &m in &config.m_values {
                tasks.push((path_id, combo, m));
            }
        }
    }
    let work = |task: &(usize, MethodCombo, usize)| -> Result<ChainRecord> {
        let (record, chain) = run_one(&model, &prior, config, &observations[task.0], *task)?;
        if let (Some(dir), Some(chain)) = (&config.output_dir, chain) {
            let f = File::create(dir.join("chains").join(chain_file_name(task.0, task.1, task.2)))?;
            let mut w = BufWriter::new(f);
            write_chain_csv(&mut w, &chain)?;
            w.flush()?;
        }
        Ok(record)
    };
    let chains: Vec<ChainRecord> = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| tasks.par_iter().map(work).collect::<Result<Vec<_>>>())?,
        None => tasks.par_iter().map(work).collect::<Result<Vec<_>>>()?,
    };

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut counters = Counters::default();
    for (path_id, &path_seed) in path_seeds.iter().enumerate() {
        for c in chains.iter().filter(|c| c.path_id == path_id) {
            counters.fallbacks += c.counters.fallbacks;
            counters.reproposals += c.counters.reproposals;
            counters.proposal_failures += c.counters.proposal_failures;
            if let Some(e) = &c.error {
                failures.push(Failure {
                    path_id,
                    path_seed,
                    stage: "chain".into(),
                    combo: Some(c.combo),
                    m: Some(c.m),
                    error: e.clone(),
                });
            }
            if let Some(p) = &c.estimates {
                for (estimator, values) in [("posterior_mean", &p.mean), ("posterior_mode", &p.mode)] {
                    for (name, &value) in names.iter().zip(values) {
                        estimates.push(EstimateRow {
                            estimator: estimator.into(),
                            combo: Some(c.combo),
                            m: Some(c.m),
                            path_id,
                            path_seed,
                            parameter: name.to_string(),
                            value,
                        });
                    }
                }
            }
        }
        if model.id() == ModelId::Gbm {
            let obs = &observations[path_id];
            let benchmarks = [("ml", ml_estimate_gbm(obs)), ("map", map_estimate_gbm(obs, &prior))];
            for (estimator, result) in benchmarks {
                match result {
                    Ok((alpha, sigma2)) => {
                        for (name, value) in names.iter().zip([alpha, sigma2]) {
                            estimates.push(EstimateRow {
                                estimator: estimator.into(),
                                combo: None,
                                m: None,
                                path_id,
                                path_seed,
                                parameter: name.to_string(),
                                value,
                            });
                        }
                    }
                    Err(e) => failures.push(Failure {
                        path_id,
                        path_seed,
                        stage: estimator.into(),
                        combo: None,
                        m: None,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }
    let metrics: Vec<ChainMetrics> = chains.iter().filter_map(|c| c.metrics.clone()).collect();
    let summary = summarize_run(&metrics);
    let report =
        StudyReport { config: config.clone(), path_seeds, observations, chains, estimates, summary, failures, counters };
    if let Some(dir) = &config.output_dir {
        write_artifacts(dir, &report)?;
    }
    Ok(report)
}

pub const CHAINS_HEADER: &str = "path_id,path_seed,combo,m,status,iterations,ess,param_acc,path_acc,max_abs_path_log_ratio,fallbacks,reproposals,proposal_failures,error";
pub const ESTIMATES_HEADER: &str = "estimator,combo,m,path_id,parameter,value,path_seed";
pub const TIMINGS_HEADER: &str = "path_id,combo,m,wall_time_s";

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_chains_csv<W: Write>(mut w: W, chains: &[ChainRecord]) -> std::io::Result<()> {
    writeln!(w, "{CHAINS_HEADER}")?;
    for c in chains {
        let m = c.metrics.as_ref();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.path_id,
            c.path_seed,
            c.combo,
            c.m,
            if c.is_ok() { "ok" } else { "failed" },
            c.iterations,
            fmt_opt(m.and_then(|m| m.ess)),
            fmt_opt(m.map(|m| m.param_accept_rate)),
            fmt_opt(m.and_then(|m| m.path_accept_rate)),
            fmt_opt(c.max_abs_path_log_ratio),
            c.counters.fallbacks,
            c.counters.reproposals,
            c.counters.proposal_failures,
            csv_text(c.error.as_deref().unwrap_or(""))
        )?;
    }
    Ok(())
}

pub fn write_estimates_csv<W: Write>(mut w: W, rows: &[EstimateRow]) -> std::io::Result<()> {
    writeln!(w, "{ESTIMATES_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.estimator,
            r.combo.map(|c| c.label()).unwrap_or_default(),
            r.m.map(|m| m.to_string()).unwrap_or_default(),
            r.path_id,
            r.parameter,
            fmt17(r.value),
            r.path_seed
        )?;
    }
    Ok(())
}

pub fn write_timings_csv<W: Write>(mut w: W, chains: &[ChainRecord]) -> std::io::Result<()> {
    writeln!(w, "{TIMINGS_HEADER}")?;
    for c in chains {
        writeln!(w, "{},{},{},{}", c.path_id, c.combo, c.m, fmt_opt(c.metrics.as_ref().map(|m| m.wall_time_s)))?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes `observations/path_NNN.csv`, `chains.csv`, `estimates.csv`,
/// `summary.csv`, `timings.csv` and `manifest.json` under `dir`.
pub fn write_artifacts(dir: &Path, report: &StudyReport) -> Result<()> {
    fs::create_dir_all(dir.join("observations"))?;
    for (i, obs) in report.observations.iter().enumerate() {
        write_file(&dir.join("observations").join(format!("path_{i:03}.csv")), |w| write_observations_csv(w, obs))?;
    }
    write_file(&dir.join("chains.csv"), |w| write_chains_csv(w, &report.chains))?;
    write_file(&dir.join("estimates.csv"), |w| write_estimates_csv(w, &report.estimates))?;
    write_file(&dir.join("summary.csv"), |w| write_summary_csv(w, &report.summary))?;
    write_file(&dir.join("timings.csv"), |w| write_timings_csv(w, &report.chains))?;
    let manifest = Manifest {
        crate_name: env!("CARGO_PKG_NAME"),
        crate_version: env!("CARGO_PKG_VERSION"),
        master_seed: report.config.master_seed,
        path_seeds: &report.path_seeds,
        chains_run: report.chains.len(),
        chains_failed: report.chains.iter().filter(|c| !c.is_ok()).count(),
        counters: report.counters,
        failures: &report.failures,
        config: &report.config,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}
