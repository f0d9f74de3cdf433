//! `wavepack`: configuration-driven experiments.
//!
//! Exit codes: 0 success, 1 configuration or usage, 2 I/O or file format,
//! 3 numerical (tolerance missed, divergence, instability, calibration).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wavepack::error::{Error, Result};

use crate::commands::Context;
use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "wavepack", version, about = "Wave-packet parametrix experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. All kernels currently run on one thread, so this only validates.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analyze a field into phase space and report the isometry defect.
    Transform {
        /// Input field stem (`.bin` + `.json`); defaults to the configured `u0`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also synthesize back and report the reconstruction error.
        #[arg(long)]
        roundtrip: bool,
    },
    /// Tent norms of a phase field for every configured `[[norms]]` entry.
    Norm {
        /// Phase field stem written by `transform`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Solve the configured wave equation.
    Solve,
    /// Run the diagnostics listed under `[diagnose]`.
    Diagnose,
    /// Relative L2 difference of two solution directories.
    Compare { a: PathBuf, b: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Ellipticity(_) | Error::Size(_) => 1,
        Error::Io(_) | Error::Format(_) => 2,
        Error::Tolerance(_) | Error::Divergence(_) | Error::Instability(_) | Error::Calibration(_) => 3,
    }
}

fn load(cli: &Cli) -> Result<Context> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Context::new(cfg, cli.out.clone())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Transform { input, roundtrip } => commands::transform(&load(cli)?, input.as_deref(), *roundtrip),
        Command::Norm { input } => commands::norm(&load(cli)?, input),
        Command::Solve => commands::solve(&load(cli)?),
        Command::Diagnose => commands::diagnose(&load(cli)?),
        Command::Compare { a, b } => commands::compare_dirs(a, b, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wavepack: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
