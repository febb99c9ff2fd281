//! `spectro`: design, profile, simulate, analyze and herald from one
//! config file.
//!
//! Exit status: 0 success, 1 runtime error, 2 invalid configuration,
//! 3 infeasible design.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Infeasible(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "spectro", version, about = "VIPA single-photon spectrometer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; SPECTRO_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for angle, focal lengths and (optionally) thickness.
    Design {
        #[command(flatten)]
        common: Common,
        /// Frequency resolution to design the thickness for, MHz.
        #[arg(long)]
        fwhm_target: Option<f64>,
    },
    /// Focal-plane intensity per detuning.
    Profile {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo detection events per detuning.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the pulse count.
        #[arg(long)]
        pulses: Option<usize>,
        /// Also write the ground-truth sidecar files.
        #[arg(long)]
        truth: bool,
    },
    /// Histograms, spatial profiles, fits and shifts from event files.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Directory holding the events_*.csv files; defaults to the output directory.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        pulses: Option<usize>,
    },
    /// Heralding probability sweep and crossover mode counts.
    Herald {
        #[command(flatten)]
        common: Common,
    },
}

fn output_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    std::env::var_os("SPECTRO_OUT")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| common.out.clone())
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let common = match &cli.command {
        Command::Design { common, .. }
        | Command::Profile { common }
        | Command::Simulate { common, .. }
        | Command::Analyze { common, .. }
        | Command::Herald { common } => common,
    };
    let cfg = RunConfig::load(&common.config)?;
    let dir = output_dir(common, &cfg);
    let outputs = match &cli.command {
        Command::Design { fwhm_target, .. } => commands::design(&cfg, *fwhm_target)?,
        Command::Profile { .. } => commands::profile(&cfg)?,
        Command::Simulate { pulses, truth, .. } => commands::simulate(&cfg, common.seed, *pulses, *truth)?,
        Command::Analyze { events, pulses, .. } => {
            let events = events.clone().unwrap_or_else(|| dir.clone());
            commands::analyze(&cfg, &events, *pulses)?
        }
        Command::Herald { .. } => commands::herald(&cfg)?,
    };
    Ok(outputs.write(&dir)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("spectro: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
