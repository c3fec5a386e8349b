mod commands;
mod output;

use clap::{Args, Parser, Subcommand};
use hdshrink::ErrorClass;
use std::path::PathBuf;
use std::process::ExitCode;

/// Shrinkage estimation of high-dimensional mean-variance portfolios.
#[derive(Debug, Parser)]
#[command(name = "hdshrink", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Traditional, bona-fide shrinkage and target weights for a return file.
    Weights(commands::WeightsArgs),
    /// Relative-loss sweep over a concentration grid.
    Simulate(commands::SimulateArgs),
    /// Numerical check of the random-matrix limits.
    Verify(commands::VerifyArgs),
    /// Rolling-window backtest.
    Backtest(commands::BacktestArgs),
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    Lib(hdshrink::Error),
    Config(String),
    Io(std::io::Error),
    /// The verifier ran but some limit was missed.
    Verification(usize),
}

impl From<hdshrink::Error> for Failure {
    fn from(e: hdshrink::Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 4,
            Failure::Lib(e) => match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Io => 4,
            },
        }
    }

    fn report(&self) -> serde_json::Value {
        let (name, message) = match self {
            Failure::Lib(e) => (e.name().to_string(), e.to_string()),
            Failure::Config(m) => ("invalid_config".to_string(), m.clone()),
            Failure::Io(e) => ("io_error".to_string(), e.to_string()),
            Failure::Verification(n) => ("verification_failed".to_string(), format!("{n} rows outside tolerance")),
        };
        serde_json::json!({ "error": name, "message": message })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Weights(a) => commands::weights(&cli.common, a),
        Command::Simulate(a) => commands::simulate(&cli.common, a),
        Command::Verify(a) => commands::verify(&cli.common, a),
        Command::Backtest(a) => commands::backtest(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.code())
        }
    }
}
