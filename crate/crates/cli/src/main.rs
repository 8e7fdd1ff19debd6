//! `neglab`: run NEG experiments from the command line.
//!
//! Every subcommand writes into a fresh `<out>/<timestamp>-<command>/`
//! directory and finishes by writing `manifest.json`. Exit status is 0 on
//! success, 2 on usage errors and 1 on any other failure, with a one-line
//! JSON error on stderr.

mod commands;
mod params;
mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use params::*;
use run::RunDir;

#[derive(Parser, Debug)]
#[command(name = "neglab", version, about = "Neuron empirical gradient experiments on a toy transformer")]
struct Cli {
    /// Seed for every random choice of the run
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with top-level seed/jobs/out and one table per subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = one per core)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root; defaults to $NEGLAB_OUT, then ./runs
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model on a task set
    Train(TrainArgs),
    /// Generate a balanced synthetic task file
    GenTasks(GenTasksArgs),
    /// Activation sweeps and NEG fits for random neurons
    Sweep(SweepArgs),
    /// CG, NeurGrad and optional IG for every neuron
    Estimate(EstimateArgs),
    /// Score estimators against sweep slopes
    EvalEstimators(EvalEstimatorsArgs),
    /// Top-K enhancement by attribution method
    Attribute(AttributeArgs),
    /// Multi-neuron additivity and the NEG magnitude curve
    Multi(MultiArgs),
    /// Fit and evaluate Polar-, Magn-, Tree-Probe and baselines
    Probe(ProbeArgs),
    /// Robustness, substitutability and forest hyperparameter tables
    Metrics(MetricsArgs),
    /// Collect finished runs into derived tables
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::GenTasks(_) => "gen-tasks",
            Command::Sweep(_) => "sweep",
            Command::Estimate(_) => "estimate",
            Command::EvalEstimators(_) => "eval-estimators",
            Command::Attribute(_) => "attribute",
            Command::Multi(_) => "multi",
            Command::Probe(_) => "probe",
            Command::Metrics(_) => "metrics",
            Command::Report(_) => "report",
        }
    }
}

/// A usage problem detected after parsing (exit 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Serialize)]
struct Globals {
    seed: u64,
    jobs: usize,
    out: PathBuf,
}

fn read_config(path: Option<&Path>) -> anyhow::Result<toml::Table> {
    let Some(path) = path else { return Ok(toml::Table::new()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| UsageError(format!("parsing {}: {e}", path.display())))?;
    const SECTIONS: [&str; 10] =
        ["train", "gen-tasks", "sweep", "estimate", "eval-estimators", "attribute", "multi", "probe", "metrics", "report"];
    for (k, v) in &table {
        let ok = match k.as_str() {
            "seed" | "jobs" | "out" => !v.is_table(),
            s => SECTIONS.contains(&s) && v.is_table(),
        };
        if !ok {
            return Err(UsageError(format!("{}: unexpected key {k:?}", path.display())).into());
        }
    }
    Ok(table)
}

fn globals(cli: &Cli, cfg: &toml::Table) -> anyhow::Result<Globals> {
    let int = |k: &str| -> anyhow::Result<Option<u64>> {
        match cfg.get(k) {
            None => Ok(None),
            Some(v) => v.as_integer().and_then(|i| u64::try_from(i).ok()).map(Some).ok_or_else(|| UsageError(format!("config {k} must be a nonnegative integer")).into()),
        }
    };
    let out = match (&cli.out, cfg.get("out")) {
        (Some(o), _) => o.clone(),
        (None, Some(v)) => PathBuf::from(v.as_str().ok_or_else(|| UsageError("config out must be a string".into()))?),
        (None, None) => std::env::var_os("NEGLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    };
    Ok(Globals {
        seed: cli.seed.or(int("seed")?).unwrap_or(0),
        jobs: cli.jobs.map(|j| j as u64).or(int("jobs")?).unwrap_or(0) as usize,
        out,
    })
}

fn execute(cli: Cli) -> anyhow::Result<PathBuf> {
    let cfg = read_config(cli.config.as_deref())?;
    let g = globals(&cli, &cfg)?;
    rayon::ThreadPoolBuilder::new().num_threads(g.jobs).build_global().context("starting the worker pool")?;
    let name = cli.command.name();
    let section = cfg.get(name);

    macro_rules! go {
        ($args:expr, $P:ty, |$p:ident, $run:ident| $body:expr) => {{
            let $p: $P = resolve($args, section)?;
            let mut $run = RunDir::create(&g.out, name)?;
            if let Some(c) = &cli.config {
                $run.input(c)?;
            }
            if let Err(e) = $body {
                if e.downcast_ref::<UsageError>().is_some() {
                    let _ = std::fs::remove_dir_all(&$run.path);
                }
                return Err(e);
            }
            let config = serde_json::json!({ "globals": &g, "params": &$p });
            $run.finish(g.seed, config)
        }};
    }

    match &cli.command {
        Command::GenTasks(a) => go!(a, GenTasksParams, |p, run| commands::gen_tasks(&p, g.seed, &mut run)),
        Command::Train(a) => go!(a, TrainParams, |p, run| commands::train(&p, g.seed, &mut run)),
        Command::Sweep(a) => go!(a, SweepParams, |p, run| commands::sweep(&p, g.seed, &mut run)),
        Command::Estimate(a) => go!(a, EstimateParams, |p, run| commands::estimate(&p, &mut run)),
        Command::EvalEstimators(a) => go!(a, EvalEstimatorsParams, |p, run| commands::eval_estimators(&p, g.seed, &mut run)),
        Command::Attribute(a) => go!(a, AttributeParams, |p, run| commands::attribute(&p, g.seed, &mut run)),
        Command::Multi(a) => go!(a, MultiParams, |p, run| commands::multi(&p, g.seed, &mut run)),
        Command::Probe(a) => go!(a, ProbeParams, |p, run| commands::probe(&p, g.seed, &mut run)),
        Command::Metrics(a) => go!(a, MetricsParams, |p, run| commands::metrics(&p, g.seed, &mut run)),
        Command::Report(a) => {
            let p: ReportParams = resolve(a, section)?;
            let from = if p.from.as_os_str().is_empty() { g.out.clone() } else { p.from.clone() };
            let runs = report::find_runs(&from)?;
            if runs.is_empty() {
                bail!("no results found in {}", from.display());
            }
            let mut run = RunDir::create(&g.out, name)?;
            report::report(&runs, &mut run)?;
            run.finish(g.seed, serde_json::json!({ "globals": &g, "params": &p }))
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<neglab::Error>() {
            return match err {
                neglab::Error::Input(_) => "input",
                neglab::Error::Format { .. } => "format",
                neglab::Error::Divergence { .. } => "divergence",
                neglab::Error::UndefinedCorrelation(_) => "undefined-correlation",
                neglab::Error::Degenerate(_) => "degenerate",
                neglab::Error::Io(_) => "io",
                neglab::Error::Csv(_) => "csv",
                neglab::Error::Json(_) => "json",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some();
            let kind = if usage { "usage" } else { error_kind(&e) };
            let msg = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{msg}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
