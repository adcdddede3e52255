//! `predpid`: design, certify, simulate and tune predictive-PID ratio
//! controllers from a TOML run configuration.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 unstable design
//! (files are still written), 3 numerical divergence in a simulation.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] predpid::Error),
}

impl CliError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(predpid::Error::NumericalDivergence { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Unstable,
    Diverged,
}

impl Status {
    fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Unstable => 2,
            Status::Diverged => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "predpid", version, about = "Predictive-PID ratio control design and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the GPC gains, write the PID gain schedule and the stability report.
    Design(Common),
    /// Run every configured controller and write per-run CSV and metrics.
    Simulate(Common),
    /// Run the weight-tuning procedure on the configured plant and step.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Also write a design for the tuned weights under `<out>/design`.
        #[arg(long)]
        design: bool,
    },
    /// Certify the delayed closed loop of the configured design.
    Stability(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.dir` from the configuration, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run independent controllers concurrently.
    #[arg(long)]
    parallel: bool,
    /// Accepted for interface stability; every algorithm is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf), CliError> {
        let cfg = RunConfig::load(&self.config)?;
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.output.as_ref().map(|o| o.dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        let dir = output::ensure_dir(&dir)?;
        Ok((cfg, dir))
    }
}

fn execute(cmd: Command) -> Result<Status, CliError> {
    match cmd {
        Command::Design(c) => {
            let (cfg, out) = c.load()?;
            commands::design(&cfg, &out)
        }
        Command::Stability(c) => {
            let (cfg, out) = c.load()?;
            commands::stability(&cfg, &out)
        }
        Command::Simulate(c) => {
            let (cfg, out) = c.load()?;
            commands::simulate(&cfg, &out, c.parallel)
        }
        Command::Tune { common, design } => {
            let (cfg, out) = common.load()?;
            commands::tune_cmd(&cfg, &out, design)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
