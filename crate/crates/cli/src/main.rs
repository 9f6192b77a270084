//! `advit`: adversarial training, evaluation and verification of miniature
//! Vision Transformers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 5 verification failure.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advit", version, about = "Adversarial training for miniature Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config and write a run directory.
    Train {
        config: PathBuf,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint under a list of attacks.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Comma-separated presets: pgdN, cwN, none.
        #[arg(long, default_value = "pgd20,pgd100,cw20")]
        attacks: String,
        /// Attack seed (defaults to $ADVIT_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify model gradients against finite differences in 64-bit.
    Gradcheck {
        /// Run config or bare model config.
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Coordinates checked per tensor.
        #[arg(long, default_value_t = 24)]
        coords: usize,
        /// Corrupt the backward rule of one primitive (self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Generate a synthetic dataset from a JSON spec.
    GenData { spec: PathBuf, out: PathBuf },
    /// Print the warm-up trace as CSV: epoch,batch,p,k.
    ScheduleDump {
        config: PathBuf,
        /// Override the batch count derived from the training set.
        #[arg(long)]
        batches_per_epoch: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, quiet } => commands::cmd_train(config, *quiet),
        Command::Eval { checkpoint, dataset, attacks, seed, out } => {
            commands::cmd_eval(checkpoint, dataset, attacks, *seed, out.as_deref())
        }
        Command::Gradcheck { config, seed, coords, inject_fault } => {
            commands::cmd_gradcheck(config, *seed, *coords, inject_fault.as_deref())
        }
        Command::GenData { spec, out } => commands::cmd_gen_data(spec, out),
        Command::ScheduleDump { config, batches_per_epoch } => commands::cmd_schedule_dump(config, *batches_per_epoch),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
