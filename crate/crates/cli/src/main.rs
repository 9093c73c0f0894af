use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sdeinfer::density::{euler_logdensity, milstein_logdensity};
use sdeinfer::diagnostics::{multivariate_ess, write_summary_csv};
use sdeinfer::mcmc::{point_estimates, stream_rng, write_chain_csv, Stream};
use sdeinfer::output::{fmt17, fmt_opt};
use sdeinfer::scheme::{read_observations_csv, write_observations_csv, DataGeneration};
use sdeinfer::{
    run_chain, run_study, Cir, DiffusionModel, Gbm, McmcConfig, MethodCombo, ModelId, PriorSpec, StudyConfig,
    StudyModel,
};

#[derive(Parser)]
#[command(name = "sdeinfer", version, about = "Bayesian estimation for scalar diffusions with Euler or Milstein densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one path of equidistant observations as `time,value` CSV.
    Simulate(SimulateArgs),
    /// Run a single chain on an observation CSV.
    Estimate(EstimateArgs),
    /// Run the simulation study over paths, combos and m values.
    Study(StudyArgs),
    /// Tabulate Euler, Milstein and exact transition densities.
    Density(DensityArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model id.
    #[arg(long, default_value = "gbm")]
    model: ModelId,
    /// True parameters: `alpha,sigma2` for gbm, `alpha,beta,sigma2` for cir.
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
}

impl ModelArgs {
    fn theta(&self) -> Vec<f64> {
        self.theta.clone().unwrap_or_else(|| match self.model {
            ModelId::Gbm => StudyConfig::gbm_paper().theta_true,
            ModelId::Cir => StudyConfig::cir_paper().theta_true,
        })
    }

    fn build(&self) -> Result<StudyModel> {
        Ok(StudyModel::new(self.model, &self.theta())?)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    x0: Option<f64>,
    /// Number of observations including the initial value.
    #[arg(long, default_value_t = 50)]
    observations: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Generate by Euler steps of at most this size instead of exactly.
    #[arg(long)]
    fine_step: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ChainArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<f64>,
    /// Poisson mean of the block sizes.
    #[arg(long)]
    lambda: Option<f64>,
    /// Random-walk variances, one per parameter.
    #[arg(long, value_delimiter = ',')]
    rw_variances: Option<Vec<f64>>,
}

impl ChainArgs {
    fn apply(&self, c: &mut McmcConfig) {
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.burn_in {
            c.burn_in_fraction = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = &self.rw_variances {
            c.rw_variances = v.clone();
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Observation CSV with header `time,value`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "gbm")]
    model: ModelId,
    /// Known mean-reversion speed for cir.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Method combo, e.g. `MB/Milstein/Milstein`.
    #[arg(long, default_value = "MB/Milstein/Milstein")]
    combo: MethodCombo,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    chain: ChainArgs,
    /// Write the samples as CSV.
    #[arg(long)]
    chain_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Gbm,
    GbmDesk,
    Cir,
    CirDesk,
}

#[derive(Args)]
struct StudyArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting configuration when no file is given.
    #[arg(long, value_enum, default_value = "gbm-desk")]
    preset: Preset,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    model: Option<ModelId>,
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    #[arg(long)]
    x0: Option<f64>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    observations: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Comma-separated combos, e.g. `LC/Euler/Euler,MB/Milstein/Milstein`.
    #[arg(long, value_delimiter = ',')]
    combos: Option<Vec<MethodCombo>>,
    #[arg(long, value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Generate data by Euler steps of at most this size.
    #[arg(long)]
    fine_step: Option<f64>,
    /// Generate data exactly.
    #[arg(long, conflicts_with = "fine_step")]
    exact_data: bool,
    #[arg(long)]
    write_chains: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    chain: ChainArgs,
}

impl StudyArgs {
    fn resolve(&self) -> Result<StudyConfig> {
        let mut c = match &self.config {
            Some(path) => {
                StudyConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?
            }
            None => match self.preset {
                Preset::Gbm => StudyConfig::gbm_paper(),
                Preset::GbmDesk => StudyConfig::gbm_paper().desk(),
                Preset::Cir => StudyConfig::cir_paper(),
                Preset::CirDesk => StudyConfig::cir_paper().desk(),
            },
        };
        if let Some(v) = self.model {
            c.model = v;
        }
        if let Some(v) = &self.theta {
            c.theta_true = v.clone();
        }
        if let Some(v) = self.x0 {
            c.x0 = v;
        }
        if let Some(v) = self.n_paths {
            c.n_paths = v;
        }
        if let Some(v) = self.observations {
            c.observations = v;
        }
        if let Some(v) = self.horizon {
            c.horizon = v;
        }
        if let Some(v) = &self.combos {
            c.combos = v.clone();
        }
        if let Some(v) = &self.m_values {
            c.m_values = v.clone();
        }
        if let Some(v) = self.master_seed {
            c.master_seed = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = Some(v.clone());
        }
        if let Some(v) = self.fine_step {
            c.data_generation = DataGeneration::FineEuler { max_step: v };
        }
        if self.exact_data {
            c.data_generation = DataGeneration::Exact;
        }
        if self.write_chains {
            c.write_chains = true;
        }
        if let Some(v) = self.threads {
            c.threads = Some(v);
        }
        self.chain.apply(&mut c.mcmc);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Starting state.
    #[arg(long)]
    from: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Lower end of the grid; Euler mean minus 5 sd by default.
    #[arg(long)]
    lo: Option<f64>,
    /// Upper end of the grid; Euler mean plus 5 sd by default.
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long, default_value_t = 1001)]
    points: usize,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn default_x0(model: ModelId) -> f64 {
    match model {
        ModelId::Gbm => StudyConfig::gbm_paper().x0,
        ModelId::Cir => StudyConfig::cir_paper().x0,
    }
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let model = a.model.build()?;
    let how = match a.fine_step {
        Some(max_step) => DataGeneration::FineEuler { max_step },
        None => DataGeneration::Exact,
    };
    let x0 = a.x0.unwrap_or_else(|| default_x0(a.model.model));
    let mut rng = stream_rng(a.seed, Stream::Data);
    let obs = model.generate(x0, a.observations, a.horizon, how, &mut rng)?;
    let mut w = output(a.out.as_deref())?;
    write_observations_csv(&mut w, &obs)?;
    w.flush()?;
    Ok(())
}

fn estimate(a: &EstimateArgs) -> Result<()> {
    let file = File::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let obs = read_observations_csv(BufReader::new(file))?;
    let mut cfg = McmcConfig { m: a.m, seed: a.seed, ..McmcConfig::default() };
    a.chain.apply(&mut cfg);
    let chain = match a.model {
        ModelId::Gbm => run_chain(a.combo, &Gbm, &PriorSpec::gbm_study(), &obs, &cfg)?,
        ModelId::Cir => run_chain(a.combo, &Cir::with_known_alpha(a.alpha), &PriorSpec::cir_study(), &obs, &cfg)?,
    };
    if let Some(path) = &a.chain_out {
        let mut w = output(Some(path))?;
        write_chain_csv(&mut w, &chain)?;
        w.flush()?;
    }
    let estimates = point_estimates(&chain, cfg.burn_in_fraction).ok();
    let ess = multivariate_ess(chain.post_burn_in(cfg.burn_in_fraction)).ok().map(|r| r.multivariate_ess);
    let record = serde_json::json!({
        "summary": chain.summary(),
        "param_names": chain.param_names,
        "posterior_mean": estimates.as_ref().map(|e| e.mean.clone()),
        "posterior_mode": estimates.as_ref().map(|e| e.mode.clone()),
        "ess": ess,
    });
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn study(a: &StudyArgs) -> Result<()> {
    let cfg = a.resolve()?;
    if a.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let report = run_study(&cfg)?;
    let mut out = io::stdout().lock();
    write_summary_csv(&mut out, &report.summary)?;
    eprintln!(
        "{} chains, {} failures, counters: fallbacks {} reproposals {} proposal failures {}",
        report.chains.len(),
        report.failures.len(),
        report.counters.fallbacks,
        report.counters.reproposals,
        report.counters.proposal_failures
    );
    if let Some(dir) = &cfg.output_dir {
        eprintln!("artifacts written to {}", dir.display());
    }
    Ok(())
}

/// `(y_to, euler, milstein, exact)`.
type DensityRow = (f64, f64, f64, Option<f64>);

fn density_table<M: DiffusionModel>(
    model: &M,
    p: &M::Params,
    from: f64,
    dt: f64,
    lo: Option<f64>,
    hi: Option<f64>,
    points: usize,
) -> Result<Vec<DensityRow>> {
    if points < 2 {
        bail!("need at least 2 grid points");
    }
    let c = model.coefficients(from, p);
    let mean = from + c.mu * dt;
    let sd = c.sigma.abs() * dt.sqrt();
    let lo = lo.unwrap_or((mean - 5.0 * sd).max(model.state_lower_bound()));
    let hi = hi.unwrap_or(mean + 5.0 * sd);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        bail!("empty grid [{lo}, {hi}]");
    }
    let h = (hi - lo) / (points - 1) as f64;
    let has_exact = model.exact_logdensity(p, from, from, dt).is_some();
    (0..points)
        .map(|i| {
            let y = lo + i as f64 * h;
            let e = euler_logdensity(model, p, from, y, dt)?.exp();
            let m = milstein_logdensity(model, p, from, y, dt)?.exp();
            let x = has_exact.then(|| model.exact_logdensity(p, from, y, dt).map_or(0.0, f64::exp));
            Ok((y, e, m, x))
        })
        .collect()
}

fn density(a: &DensityArgs) -> Result<()> {
    let model = a.model.build()?;
    let from = a.from.unwrap_or_else(|| default_x0(a.model.model));
    let rows = match model {
        StudyModel::Gbm(p) => density_table(&Gbm, &p, from, a.dt, a.lo, a.hi, a.points)?,
        StudyModel::Cir(p) => density_table(&Cir::full(), &p, from, a.dt, a.lo, a.hi, a.points)?,
    };
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "y_to,euler,milstein,exact")?;
    for (y, e, m, x) in rows {
        writeln!(w, "{},{},{},{}", fmt17(y), fmt17(e), fmt17(m), fmt_opt(x))?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(&a),
        Command::Estimate(a) => estimate(&a),
        Command::Study(a) => study(&a),
        Command::Density(a) => density(&a),
    }
}
