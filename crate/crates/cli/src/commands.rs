use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use drlogit_core::simulate::{run_monte_carlo, DgpSpec, ScenarioConfig, Summary};
use drlogit_core::{EstimatorConfig, LearnerSpec, LinkFunction, Method, PhiKind, Scenario};
use serde::Serialize;

use crate::config::RunConfig;
use crate::io::{read_dataset, read_table, write_json, write_replicates};
use crate::{CliError, SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "drlogit", version, about = "Doubly robust inference for the logistic partially linear model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate beta from a CSV file and write a JSON report.
    Fit(FitArgs),
    /// Run a Monte Carlo study on a built-in or configured design.
    Simulate(SimulateArgs),
    /// Check a data file and/or a configuration file without fitting.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Lowdim,
    Hd,
    Ml,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Lowdim => Method::Lowdim,
            MethodArg::Hd => Method::HdSparse,
            MethodArg::Ml => Method::MlCrossfit,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LinkArg {
    Identity,
    Expit,
    Exp,
}

impl From<LinkArg> for LinkFunction {
    fn from(l: LinkArg) -> LinkFunction {
        match l {
            LinkArg::Identity => LinkFunction::Identity,
            LinkArg::Expit => LinkFunction::LogisticExpit,
            LinkArg::Exp => LinkFunction::Exponential,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhiArg {
    None,
    Simp,
    Opt,
}

impl From<PhiArg> for PhiKind {
    fn from(p: PhiArg) -> PhiKind {
        match p {
            PhiArg::None => PhiKind::None,
            PhiArg::Simp => PhiKind::Simp,
            PhiArg::Opt => PhiKind::Opt,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioArg {
    BothCorrect,
    RCorrectOnly,
    MCorrectOnly,
    BothWrong,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Scenario {
        match s {
            ScenarioArg::BothCorrect => Scenario::BothCorrect,
            ScenarioArg::RCorrectOnly => Scenario::RCorrectOnly,
            ScenarioArg::MCorrectOnly => Scenario::MCorrectOnly,
            ScenarioArg::BothWrong => Scenario::BothWrong,
        }
    }
}

/// Estimator settings shared by `fit` and `simulate`.
#[derive(Debug, Clone, Args)]
pub struct EstimatorArgs {
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Link of the exposure model `E[A | X, Y = 0] = g(X'alpha)`.
    #[arg(long, value_enum)]
    pub link: Option<LinkArg>,
    /// Efficiency weight.
    #[arg(long, value_enum)]
    pub phi: Option<PhiArg>,
    /// Nuisance learner for `--method ml`: ridge, lasso, knn or forest.
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Confidence level of the Wald interval.
    #[arg(long)]
    pub level: Option<f64>,
    /// Worker threads (default: all available cores).
    #[arg(long, env = "DRLOGIT_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub exposure: Option<String>,
    /// Report path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    /// Replicates per sample size.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Covariate dimension of the built-in design.
    #[arg(long)]
    pub p: Option<usize>,
    /// Output directory for `replicates.csv` and `summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub exposure: Option<String>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code().try_into().unwrap_or(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Fit(a) => {
            let cfg = resolve(&a.est)?;
            in_pool(cfg.threads, || cmd_fit(&a, cfg.clone()))
        }
        Command::Simulate(a) => {
            let cfg = resolve(&a.est)?;
            in_pool(cfg.threads, || cmd_simulate(&a, cfg.clone()))
        }
        Command::Validate(a) => cmd_validate(&a),
    }
}

/// Loads the configuration file, if any, and applies the flag overrides.
fn resolve(a: &EstimatorArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let est = &mut cfg.estimator;
    if let Some(m) = a.method {
        est.method = m.into();
    }
    if let Some(l) = a.link {
        est.link = l.into();
    }
    if let Some(p) = a.phi {
        est.phi = p.into();
    }
    if let Some(name) = &a.learner {
        est.learner = name.parse::<LearnerSpec>()?;
    }
    if let Some(level) = a.level {
        est.level = level;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn in_pool<T>(threads: Option<usize>, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError>
where
    T: Send,
{
    let t = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(t)
        .build()
        .map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?
        .install(f)
}

fn required<'a, T: ?Sized>(flag: Option<&'a T>, name: &str) -> Result<&'a T, CliError> {
    flag.ok_or_else(|| CliError::invalid(format!("--{name} is required (flag or config file)")))
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    schema_version: &'static str,
    method: Method,
    link: LinkFunction,
    phi: PhiKind,
    learner: Option<&'a LearnerSpec>,
    outcome: &'a str,
    exposure: &'a str,
    n: usize,
    p: usize,
    seed: u64,
    beta_hat: f64,
    se: f64,
    ci: [f64; 2],
    ci_lower: f64,
    ci_upper: f64,
    level: f64,
    converged: bool,
    diagnostics: &'a BTreeMap<String, f64>,
}

fn cmd_fit(a: &FitArgs, cfg: RunConfig) -> Result<(), CliError> {
    let data_path = required(a.data.as_deref().or(cfg.data.as_deref()), "data")?;
    let outcome = required(a.outcome.as_deref().or(cfg.outcome.as_deref()), "outcome")?;
    let exposure = required(a.exposure.as_deref().or(cfg.exposure.as_deref()), "exposure")?;
    let out = a.out.as_deref().or(cfg.out.as_deref());

    let data = read_dataset(data_path, outcome, exposure)?;
    let est = &cfg.estimator;
    let rep = est.fit(&data, cfg.seed)?;
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        method: rep.method,
        link: est.link,
        phi: est.phi,
        learner: (est.method == Method::MlCrossfit).then_some(&est.learner),
        outcome,
        exposure,
        n: data.n(),
        p: data.p(),
        seed: cfg.seed,
        beta_hat: rep.beta_hat,
        se: rep.se,
        ci: [rep.ci_lower, rep.ci_upper],
        ci_lower: rep.ci_lower,
        ci_upper: rep.ci_upper,
        level: rep.level,
        converged: rep.converged,
        diagnostics: &rep.diagnostics,
    };
    write_json(out, &report)
}

#[derive(Debug, Serialize)]
struct SimulationSummary<'a> {
    schema_version: &'static str,
    scenario: Scenario,
    method: Method,
    beta0: f64,
    validity_guaranteed: bool,
    /// Set when neither working model is correct.
    no_validity_guarantee: bool,
    seed: u64,
    replicates: usize,
    estimator: &'a EstimatorConfig,
    dgp: &'a DgpSpec,
    mc_sd_slope: Option<f64>,
    summaries: &'a [Summary],
}

fn cmd_simulate(a: &SimulateArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let sim = &mut cfg.simulation;
    if let Some(s) = a.scenario {
        sim.scenario = s.into();
    }
    if let Some(r) = a.reps {
        sim.replicates = r;
    }
    if let Some(n) = &a.n {
        sim.n_grid = n.clone();
    }
    if let Some(p) = a.p {
        sim.p = p;
    }
    cfg.validate()?;
    let out_dir: &Path = required(a.out.as_deref().or(cfg.out.as_deref()), "out")?;
    let sim = &cfg.simulation;
    let dgp = match &sim.dgp {
        Some(d) => d.clone(),
        None => DgpSpec::standard(sim.n_grid[0], sim.p),
    };
    let scfg = ScenarioConfig {
        estimator: cfg.estimator.clone(),
        scenario: sim.scenario,
        replicates: sim.replicates,
        n_grid: sim.n_grid.clone(),
        level: cfg.estimator.level,
        seed: cfg.seed,
        // The enclosing pool already has the requested size.
        threads: None,
    };
    let res = run_monte_carlo(&scfg, &dgp)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Output(format!("cannot create {}: {e}", out_dir.display())))?;
    write_replicates(&out_dir.join("replicates.csv"), &res.replicates)?;
    let summary = SimulationSummary {
        schema_version: SCHEMA_VERSION,
        scenario: res.scenario,
        method: res.method,
        beta0: res.beta0,
        validity_guaranteed: res.validity_guaranteed,
        no_validity_guarantee: !res.validity_guaranteed,
        seed: cfg.seed,
        replicates: sim.replicates,
        estimator: &cfg.estimator,
        dgp: &dgp,
        mc_sd_slope: res.mc_sd_slope(),
        summaries: &res.summaries,
    };
    write_json(Some(&out_dir.join("summary.json")), &summary)
}

fn cmd_validate(a: &ValidateArgs) -> Result<(), CliError> {
    if a.config.is_none() && a.data.is_none() {
        return Err(CliError::invalid("nothing to validate: pass --data and/or --config"));
    }
    let cfg = match &a.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            cfg.validate()?;
            println!("config {}: ok", p.display());
            cfg
        }
        None => RunConfig::default(),
    };
    let data = a.data.as_deref().or(cfg.data.as_deref());
    if let Some(path) = data {
        let outcome = a.outcome.as_deref().or(cfg.outcome.as_deref());
        let exposure = a.exposure.as_deref().or(cfg.exposure.as_deref());
        match (outcome, exposure) {
            (Some(y), Some(ex)) => {
                let d = read_dataset(path, y, ex)?;
                println!("data {}: ok ({} rows, {} covariates)", path.display(), d.n(), d.p());
            }
            (None, None) => {
                let t = read_table(path)?;
                println!("data {}: ok ({} rows, {} columns)", path.display(), t.rows.len(), t.headers.len());
            }
            _ => return Err(CliError::invalid("--outcome and --exposure must be given together")),
        }
    }
    Ok(())
}
