//! `geomlens` command-line harness: generate distributions, analyze layers,
//! run ε sweeps, compare trained networks with the low-rank floor and
//! certify activations.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geomlens::activations::Activation;

use config::{ExperimentConfig, Overrides};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "geomlens",
    version,
    about = "Local-geometry experiments for feedforward layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Single ε level; replaces the config's list.
    #[arg(long)]
    eps: Option<f64>,
    /// Seed; wins over the config file and GEOMLENS_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Rank of the output layer.
    #[arg(long)]
    rank: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(
            &self.config,
            Overrides {
                eps: self.eps,
                seed: self.seed,
                rank: self.rank,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the joint distribution at the first ε level.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build geometry bundles and optimal low-rank layers for a distribution.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Distribution JSON from `generate`.
        #[arg(long)]
        dist: PathBuf,
        /// Network JSON; a seeded random network of the configured widths otherwise.
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every ε level and check the scaling gates.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Train a network and compare its excess risk with the rank-k floor.
    TrainCompare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the local inverse-Lipschitz condition of an activation.
    CertifyActivation {
        /// identity | sigmoid | tanh | leaky_relu:α | softplus
        #[arg(long)]
        activation: String,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        center: f64,
        /// Radius; shrunk automatically from 1 when absent.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { cfg, out } => commands::generate(&cfg.load()?, out.as_deref()),
        Command::Analyze {
            cfg,
            dist,
            net,
            out,
        } => commands::analyze(&cfg.load()?, &dist, net.as_deref(), out.as_deref()),
        Command::Sweep {
            cfg,
            out_json,
            out_csv,
        } => commands::sweep(&cfg.load()?, out_json.as_deref(), out_csv.as_deref()),
        Command::TrainCompare { cfg, out } => {
            commands::train_compare_cmd(&cfg.load()?, out.as_deref())
        }
        Command::CertifyActivation {
            activation,
            center,
            delta,
            probes,
            out,
        } => {
            let act: Activation = activation
                .parse()
                .map_err(|e| CliError::Config(format!("{e}")))?;
            commands::certify(act, center, delta, probes, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("geomlens: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
