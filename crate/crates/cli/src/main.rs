use std::path::PathBuf;
use std::process::ExitCode;

use bridgevq_cli::{commands, log};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bridgevq",
    version,
    about = "Diffusion-bridge prior over vector-quantized latents: train, sample, inpaint, eval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw unconditional samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Chain snapshot stride (defaults to the configured value).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Conditionally sample with pinned positions.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Known positions: comma-separated indices, or "all"/"none".
        #[arg(long)]
        mask: Option<String>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute metrics for a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset CSV (defaults to regenerating the training dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma list among validity, kl, nll, recovery (default all).
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out, seed } => commands::cmd_train(config, out, *seed),
        Command::Sample {
            checkpoint,
            out,
            count,
            stride,
            seed,
        } => commands::cmd_sample(checkpoint, out, *count, *stride, *seed),
        Command::Inpaint {
            checkpoint,
            out,
            mask,
            count,
            seed,
        } => commands::cmd_inpaint(checkpoint, out, mask.as_deref(), *count, *seed),
        Command::Eval {
            checkpoint,
            out,
            data,
            metrics,
            seed,
        } => commands::cmd_eval(
            checkpoint,
            out,
            data.as_deref(),
            metrics.as_deref(),
            *seed,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error(&format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
