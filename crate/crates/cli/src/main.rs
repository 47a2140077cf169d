//! `mlsa`: validate configurations, run replicated experiments, print
//! predictions and render plots.

mod artifacts;
mod plot;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlsa_core::asymptotics::{prediction_csv, prediction_table};
use mlsa_core::config::ExperimentConfig;
use mlsa_core::params::{validate, ParameterSet, Schedule};
use mlsa_core::Error;

#[derive(Parser)]
#[command(name = "mlsa", version, about = "Multilevel stochastic approximation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and print its validation report.
    Validate { config: PathBuf },
    /// Run the replicated experiment and write its artifacts.
    Run {
        config: PathBuf,
        /// Overrides `replication.master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render plots and QQ data from a completed run directory.
    Plot { run_dir: PathBuf },
    /// Print the asymptotic prediction table at the configured checkpoints.
    Predict {
        config: PathBuf,
        /// Overrides `replication.master_seed` (affects only the echoed hash).
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failure with its exit status: 1 for domain failures, 2 for usage/parse.
#[derive(Debug)]
pub enum Failure {
    Domain(String),
    Usage(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Domain(m) | Failure::Usage(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse(m) => Failure::Usage(format!("parse error: {m}")),
            other => Failure::Domain(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

fn load(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.replication.master_seed = s;
    }
    Ok(cfg)
}

fn cmd_validate(path: &Path) -> CliResult<()> {
    let cfg = load(path, None)?;
    let report = validate(&cfg.parameters);
    println!("{report}");
    if !report.accepted {
        return Err(Failure::Domain("parameters rejected".into()));
    }
    cfg.build()?;
    println!("config_hash {}", cfg.hash()?);
    Ok(())
}

fn cmd_predict(path: &Path, seed: Option<u64>) -> CliResult<()> {
    let cfg = load(path, seed)?;
    let schedule = Schedule::new(ParameterSet::new(cfg.parameters.clone())?);
    let spec = cfg.replication_spec()?;
    let rows = prediction_table(&schedule, &spec.checkpoint_set())?;
    println!("# config_hash={} master_seed={}", cfg.hash()?, spec.master_seed);
    print!("{}", prediction_csv(&rows));
    Ok(())
}

fn cmd_run(path: &Path, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = load(path, seed)?;
    let experiment = cfg.build()?;
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Failure::Usage("--workers must be positive".into()));
    }
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    artifacts::run(&cfg, &experiment, workers, &dir)?;
    if cfg.output.plots {
        plot::render(&dir)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Run {
            config,
            seed,
            workers,
            out,
        } => cmd_run(&config, seed, workers, out),
        Command::Plot { run_dir } => plot::render(&run_dir),
        Command::Predict { config, seed } => cmd_predict(&config, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            match f {
                Failure::Domain(_) => ExitCode::from(1),
                Failure::Usage(_) => ExitCode::from(2),
            }
        }
    }
}
