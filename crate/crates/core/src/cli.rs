//! The `sos` command line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{FilterModel, RunConfig};
use crate::economy::{price_dividend, Economy, EconomyState, LearningModel, StructuralParams};
use crate::error::{Error, ErrorFamily, Result};
use crate::experiments::{
    mc_accuracy, reference_path, var_backtest, write_backtest_csv, DataModel, McAccuracySpec,
    VarBacktestSpec,
};
use crate::fi::{fi_filter, fi_mle, fi_std_errors, FiModel, FiParams, FiStateModel};
use crate::filter::{run_filter, FilterConfig, MomentFn, StateModel};
use crate::ii::{estimate_ii, smm_estimator};
use crate::io::{default_start_date, ingest_returns, write_returns, ReturnSeries};
use crate::risk::vuong_test;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "sos",
    version,
    about = "SOS particle filtering and estimation of a multifrequency learning economy"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `[filter] seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate a path and export it with its returns.
    Simulate,
    /// Run the particle filter on a return series.
    Filter,
    /// Full-information maximum likelihood.
    EstimateFi,
    /// Indirect inference with the full-information auxiliary estimator.
    EstimateIi,
    /// Simulated method of moments.
    EstimateSmm,
    /// Likelihood precision of the filter over replications.
    McAccuracy,
    /// Backtest model-based and historical VaR.
    VarBacktest,
    /// Vuong comparison of two models.
    Vuong,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Filter => "filter",
            Command::EstimateFi => "estimate-fi",
            Command::EstimateIi => "estimate-ii",
            Command::EstimateSmm => "estimate-smm",
            Command::McAccuracy => "mc-accuracy",
            Command::VarBacktest => "var-backtest",
            Command::Vuong => "vuong",
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.family() {
        ErrorFamily::Config => 2,
        ErrorFamily::Numeric => 3,
        ErrorFamily::Data => 4,
    }
}

/// Provenance written into every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub command: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    meta: &'a Meta,
    result: T,
}

struct Run {
    cfg: RunConfig,
    meta: Meta,
    out_dir: PathBuf,
}

impl Run {
    fn seed(&self) -> u64 {
        self.cfg.filter.seed
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out_dir.join(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, result: T) -> Result<()> {
        let mut w = self.create(name)?;
        let art = Artifact {
            meta: &self.meta,
            result,
        };
        serde_json::to_writer_pretty(&mut w, &art).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// CSV writer whose first line is a `#` comment with the provenance.
    fn csv_file(&self, name: &str) -> Result<BufWriter<File>> {
        let mut w = self.create(name)?;
        let m = &self.meta;
        writeln!(
            w,
            "# sos {} command={} config_sha256={} seed={}",
            m.version, m.command, m.config_sha256, m.seed
        )?;
        Ok(w)
    }

    fn params(&self) -> Result<StructuralParams> {
        self.cfg.model.params()
    }

    /// The configured return file, or a path simulated from `[simulate]`.
    fn returns(&self) -> Result<Vec<f64>> {
        match &self.cfg.io.returns {
            Some(p) => Ok(ingest_returns(p)?.returns),
            None => {
                let s = &self.cfg.simulate;
                Ok(reference_path(&self.params()?, s.data, s.length, self.seed())?.returns)
            }
        }
    }

    fn filter_config(&self) -> Result<FilterConfig> {
        self.cfg
            .filter
            .filter_config(self.cfg.filter.particles, self.seed())
    }

    fn learning_model(&self, params: &StructuralParams) -> Result<LearningModel> {
        Ok(LearningModel {
            economy: Economy::calibrated(params.clone())?,
            burn_in: self.cfg.filter.burn_in,
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.filter.seed = seed;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    fs::create_dir_all(&cli.out_dir)?;
    let run = Run {
        meta: Meta {
            command: cli.command.name(),
            version: VERSION,
            config_sha256: cfg.hash(),
            seed: cfg.filter.seed,
        },
        cfg,
        out_dir: cli.out_dir,
    };
    log::info!(
        "{} seed={} config={}",
        run.meta.command,
        run.meta.seed,
        run.meta.config_sha256
    );
    match cli.command {
        Command::Simulate => cmd_simulate(&run),
        Command::Filter => cmd_filter(&run),
        Command::EstimateFi => cmd_estimate_fi(&run),
        Command::EstimateIi => cmd_estimate_ii(&run, false),
        Command::EstimateSmm => cmd_estimate_ii(&run, true),
        Command::McAccuracy => cmd_mc_accuracy(&run),
        Command::VarBacktest => cmd_var_backtest(&run),
        Command::Vuong => cmd_vuong(&run),
    }
}

fn cmd_simulate(run: &Run) -> Result<()> {
    let s = &run.cfg.simulate;
    let path = reference_path(&run.params()?, s.data, s.length, run.seed())?;
    let mut w = run.csv_file("path.csv")?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["t", "nature", "q_nature", "q_belief", "return"])
            .map_err(crate::filter::csv_io)?;
        for t in 0..path.returns.len() {
            c.write_record([
                (t + 1).to_string(),
                path.nature[t].to_string(),
                path.q_nature[t].to_string(),
                path.q_belief[t].to_string(),
                path.returns[t].to_string(),
            ])
            .map_err(crate::filter::csv_io)?;
        }
        c.flush()?;
    }
    w.flush()?;
    let start = s.start_date()?.unwrap_or_else(default_start_date);
    let series = ReturnSeries::with_business_days(start, path.returns)?;
    let mut w = run.csv_file("returns.csv")?;
    write_returns(&mut w, &series)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct FilterSummary {
    model: FilterModel,
    particles: usize,
    observations: usize,
    loglik: f64,
    exact_loglik: Option<f64>,
}

fn filter_and_write<M: StateModel>(
    run: &Run,
    model: &M,
    returns: &[f64],
    moments: &[MomentFn<'_, M::State>],
    exact: Option<f64>,
) -> Result<()> {
    let out = run_filter(model, returns, &run.filter_config()?, moments)?;
    let mut w = run.csv_file("filter_trace.csv")?;
    out.write_trace_csv(&mut w, &["q_nature", "q_belief"])?;
    w.flush()?;
    run.write_json(
        "filter.json",
        FilterSummary {
            model: run.cfg.filter.model,
            particles: run.cfg.filter.particles,
            observations: returns.len(),
            loglik: out.loglik,
            exact_loglik: exact,
        },
    )
}

fn cmd_filter(run: &Run) -> Result<()> {
    let returns = run.returns()?;
    let params = run.params()?;
    match run.cfg.filter.model {
        FilterModel::Learning => {
            let model = run.learning_model(&params)?;
            let coeffs = model.economy.coefficients().to_vec();
            let qm = |s: &EconomyState| coeffs[s.nature];
            let qb = |s: &EconomyState| price_dividend(&s.belief, &coeffs);
            filter_and_write(run, &model, &returns, &[&qm, &qb], None)
        }
        FilterModel::FullInformation => {
            let model = FiStateModel {
                model: FiModel::new(&params)?,
            };
            let exact = fi_filter(&returns, &model.model)?.loglik;
            let coeffs = model.model.economy().coefficients().to_vec();
            let q = |s: &usize| coeffs[*s];
            filter_and_write(run, &model, &returns, &[&q, &q], Some(exact))
        }
    }
}

#[derive(Serialize)]
struct FiEstimate {
    phi: FiParams,
    loglik: f64,
    se: Option<FiParams>,
    converged: bool,
    starts: Vec<crate::fi::FiStartReport>,
}

fn cmd_estimate_fi(run: &Run) -> Result<()> {
    let returns = run.returns()?;
    let base = run.params()?;
    let fit = fi_mle(
        &returns,
        &base,
        None,
        &run.cfg.estimation.mle_options(run.seed()),
    )?;
    let se = match fi_std_errors(&returns, &base, &fit.phi) {
        Ok(se) => Some(se),
        Err(e) => {
            log::warn!("no standard errors: {e}");
            None
        }
    };
    run.write_json(
        "estimate_fi.json",
        FiEstimate {
            phi: fit.phi,
            loglik: fit.loglik,
            se,
            converged: fit.converged,
            starts: fit.starts,
        },
    )
}

fn cmd_estimate_ii(run: &Run, smm: bool) -> Result<()> {
    let returns = run.returns()?;
    let base = run.params()?;
    let opts = run.cfg.estimation.ii_options(run.seed());
    if smm {
        run.write_json("estimate_smm.json", smm_estimator(&returns, &base, &opts)?)
    } else {
        run.write_json("estimate_ii.json", estimate_ii(&returns, &base, &opts)?)
    }
}

fn cmd_mc_accuracy(run: &Run) -> Result<()> {
    let m = &run.cfg.mc_accuracy;
    let spec = McAccuracySpec {
        params: run.params()?,
        data: m.data,
        path_length: m.length,
        particles: m.particles.clone(),
        replications: m.replications,
        sigma_deltas: m.sigma_deltas.clone(),
        full_information_filter: m.full_information_filter,
        burn_in: run.cfg.filter.burn_in,
        filter: run.filter_config()?,
        seed: run.seed(),
    };
    let report = mc_accuracy(&spec)?;
    let mut w = run.csv_file("mc_accuracy.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    run.write_json("mc_accuracy.json", &report)
}

fn cmd_var_backtest(run: &Run) -> Result<()> {
    let v = &run.cfg.var;
    let params = run.params()?;
    let returns = match &run.cfg.io.returns {
        Some(p) => ingest_returns(p)?.returns,
        None => {
            reference_path(
                &params,
                DataModel::Learning,
                v.warmup + v.out_of_sample,
                run.seed(),
            )?
            .returns
        }
    };
    let spec = VarBacktestSpec {
        levels: v.levels.clone(),
        horizons: v.horizons.clone(),
        paths_per_particle: v.paths_per_particle,
        window: v.window,
        first_origin: v.warmup,
        filter: run.filter_config()?,
    };
    let rows = match run.cfg.filter.model {
        FilterModel::Learning => var_backtest(&run.learning_model(&params)?, &returns, &spec)?,
        FilterModel::FullInformation => var_backtest(
            &FiStateModel {
                model: FiModel::new(&params)?,
            },
            &returns,
            &spec,
        )?,
    };
    let mut w = run.csv_file("var_backtest.csv")?;
    write_backtest_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

/// Per-period log-likelihood contributions: exact for the
/// full-information model, filtered otherwise.
fn log_increments(
    run: &Run,
    kind: FilterModel,
    params: &StructuralParams,
    returns: &[f64],
) -> Result<Vec<f64>> {
    match kind {
        FilterModel::FullInformation => {
            Ok(fi_filter(returns, &FiModel::new(params)?)?.log_increments)
        }
        FilterModel::Learning => {
            let model = run.learning_model(params)?;
            let out = run_filter(&model, returns, &run.filter_config()?, &[])?;
            Ok(out.steps.iter().map(|s| s.log_increment).collect())
        }
    }
}

#[derive(Serialize)]
struct VuongReport {
    model: FilterModel,
    alternative: FilterModel,
    observations: usize,
    loglik: f64,
    alternative_loglik: f64,
    statistic: f64,
    /// Two-sided rejection of equal fit at the 5% level.
    reject_at_5pct: bool,
}

fn cmd_vuong(run: &Run) -> Result<()> {
    let returns = run.returns()?;
    let params = run.params()?;
    let vb = &run.cfg.vuong;
    let alt_params = vb.alternative_params(&params)?;
    let kind = run.cfg.filter.model;
    let alt_kind = vb.alternative.model.unwrap_or(kind);
    let a = log_increments(run, kind, &params, &returns)?;
    let b = log_increments(run, alt_kind, &alt_params, &returns)?;
    let statistic = vuong_test(&a, &b, vb.tau)?;
    run.write_json(
        "vuong.json",
        VuongReport {
            model: kind,
            alternative: alt_kind,
            observations: returns.len(),
            loglik: a.iter().sum(),
            alternative_loglik: b.iter().sum(),
            statistic,
            reject_at_5pct: statistic.abs() > 1.959_963_984_540_054,
        },
    )
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Paths of the artifacts a command writes into the output directory.
pub fn artifact_names(command: Command) -> &'static [&'static str] {
    match command {
        Command::Simulate => &["path.csv", "returns.csv"],
        Command::Filter => &["filter.json", "filter_trace.csv"],
        Command::EstimateFi => &["estimate_fi.json"],
        Command::EstimateIi => &["estimate_ii.json"],
        Command::EstimateSmm => &["estimate_smm.json"],
        Command::McAccuracy => &["mc_accuracy.csv", "mc_accuracy.json"],
        Command::VarBacktest => &["var_backtest.csv"],
        Command::Vuong => &["vuong.json"],
    }
}
