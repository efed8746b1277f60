//! `hgmae`: multilevel masked-autoencoder pretraining for graph datasets.

mod commands;
mod config;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Ingest(#[from] hgmae_core::graph::IngestError),
    #[error(transparent)]
    Train(#[from] hgmae_core::training::TrainError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            // Validation problems exit 2, mirroring argument errors.
            CliError::Config(_) => 2,
            CliError::Train(hgmae_core::training::TrainError::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hgmae",
    version,
    about = "Multi-scale masked-autoencoder pretraining on graphs",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file; omitted sections use the documented defaults.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=5. Repeatable;
    /// overrides beat the file, which beats defaults.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the coarse-graph hierarchy for every graph and dump it as JSON.
    Coarsen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the node-recovery table R(t) for t = 0..=train.epochs as CSV.
    Schedule {
        #[command(flatten)]
        config: ConfigArgs,
        /// Hypothetical masked-node count the table is computed for.
        #[arg(long = "n-m", default_value_t = 10)]
        n_m: usize,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain on the configured dataset and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training-log CSV path (default: checkpoint path with .log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embed every graph with a checkpoint and write a CSV matrix.
    Embed {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Embeddings CSV output path (num_graphs rows).
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated linear probe over an embeddings CSV.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        embeddings: PathBuf,
    },
}

fn default_config_help() -> String {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).unwrap();
    format!(
        "Config defaults (JSON; any subset may be given in --config or --set):\n{defaults}\n\n\
         data.format: \"tu\" (directory of <name>_A.txt, <name>_graph_indicator.txt, optional\n\
         <name>_graph_labels.txt / <name>_node_labels.txt / <name>_node_attributes.txt) or\n\
         \"jsonl\" (one object per line: edges [[u,v],..], optional features [[..],..], label).\n\
         mask.recovery.t_e null means a quarter of train.epochs.\n\
         All randomness flows from train.seed and hierarchy.seed."
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = Cli::command()
        .after_help(default_config_help())
        .get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());

    let result = match &cli.command {
        Command::Coarsen { config, out } => {
            resolve(config).and_then(|cfg| commands::cmd_coarsen(&cfg, out.as_deref()))
        }
        Command::Schedule { config, n_m, out } => {
            resolve(config).and_then(|cfg| commands::cmd_schedule(&cfg, *n_m, out.as_deref()))
        }
        Command::Pretrain { config, out, log } => {
            resolve(config).and_then(|cfg| commands::cmd_pretrain(&cfg, out, log.as_deref()))
        }
        Command::Embed { config, checkpoint, out } => {
            resolve(config).and_then(|cfg| commands::cmd_embed(&cfg, checkpoint, out))
        }
        Command::Probe { config, embeddings } => {
            resolve(config).and_then(|cfg| commands::cmd_probe(&cfg, embeddings))
        }
    };

    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    RunConfig::resolve(args.config.as_deref(), &args.set)
}
