//! `decode`: reproducible continual-expansion experiments from the command line.

mod commands;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "decode", version, about = "Continual domain expansion for trajectory prediction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for datasets, checkpoints and reports.
    #[arg(long, global = true, default_value = "decode-run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining mix and per-domain train/val datasets.
    GenData,
    /// Pretrain the generalized model on the mix.
    Pretrain,
    /// Train one expansion phase.
    Expand {
        #[arg(long)]
        phase: usize,
        /// Start from this checkpoint instead of the previous phase's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Staircase, AER/FGT, flow ROC, selection confusion and baselines after a phase.
    Eval {
        #[arg(long)]
        phase: usize,
        /// Use this checkpoint for the final phase.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fused prediction for one scene.
    Predict {
        #[arg(long)]
        scene: u64,
        /// Defaults to the latest phase checkpoint in the working directory.
        #[arg(long)]
        phase: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Draw this many components with the stochastic sampler.
        #[arg(long, default_value_t = 0)]
        samples: usize,
    },
    /// Sweep the prior evidence over the configured grid.
    AblateE0 {
        /// Defaults to the configured ablation phase.
        #[arg(long)]
        phase: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the whole plan end to end and write the summary report.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DECODE_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData => commands::gen_data(&cli.common),
        Command::Pretrain => commands::pretrain(&cli.common),
        Command::Expand { phase, checkpoint } => commands::expand(&cli.common, phase, checkpoint),
        Command::Eval { phase, checkpoint } => commands::eval(&cli.common, phase, checkpoint),
        Command::Predict {
            scene,
            phase,
            checkpoint,
            samples,
        } => commands::predict(&cli.common, scene, phase, checkpoint, samples),
        Command::AblateE0 { phase, checkpoint } => commands::ablate(&cli.common, phase, checkpoint),
        Command::Report => commands::report(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
