use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odp_core::OdpError;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "odp", version, about = "Lifelong RL with offline distillation of the replay buffer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory for checkpoints, buffers, metrics and report.json.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Online phase over the schedule, then distillation of the full buffer.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Offline distillation of one or more buffer files.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Buffer file; repeat to concatenate several.
        #[arg(long = "buffer", required = true)]
        buffers: Vec<PathBuf>,
    },
    /// Evaluates a checkpoint (or a freshly initialised agent) on the eval envs.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Agent manifest written by train or distill.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dataset-imbalance diagnostics.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long = "buffer", required = true)]
        buffers: Vec<PathBuf>,
        /// scale-reward, two-actors, beta-sweep, ratio-sweep or bc; overrides probe.mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Per-source statistics of buffer files.
    ReplayInfo {
        #[arg(long = "buffer", required = true)]
        buffers: Vec<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<OdpError>() {
        Some(OdpError::Divergence { .. }) => 1,
        Some(OdpError::Config { .. } | OdpError::InvalidInput(_)) => 2,
        Some(OdpError::Io(_) | OdpError::Format { .. }) => 3,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Distill { common, buffers } => commands::distill(&common, &buffers),
        Command::Eval { common, checkpoint } => commands::eval(&common, checkpoint.as_deref()),
        Command::Probe { common, buffers, mode } => commands::probe(&common, &buffers, mode.as_deref()),
        Command::ReplayInfo { buffers } => commands::replay_info(&buffers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
