//! `flowmoe` — one executable for the whole pipeline: flow-matching
//! pretraining and fine-tuning, grid sampling, few-step distillation,
//! instruction-edit training and application, corpus dedup/filtering, and
//! numerical self-verification.
//!
//! Exit codes: 0 success, 1 runtime/verification failure, 2 bad
//! configuration, 3 numerical abort.

mod artifacts;
mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowmoe::error::{Error, Result};
use flowmoe::scalar::Scalar;

use artifacts::{write_artifact_manifest, Artifact};
use config::{ConfigCli, PrecisionOpt, RunConfig};

#[derive(Parser)]
#[command(name = "flowmoe", version, about = "sparse-MoE flow-matching pipeline")]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// dotted-path override, e.g. --set flow.lr=0.002 (repeatable)
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    /// override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// override the output directory
    #[arg(long, global = true)]
    out: Option<String>,
    /// numeric precision for models and checkpoints
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionOpt>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch with the flow-matching objective
    Pretrain,
    /// Continue training from flow.init_checkpoint
    Finetune,
    /// Sample a grid of images from a checkpoint (default 50 steps)
    Sample,
    /// Distill a few-step student from a teacher checkpoint
    Distill {
        /// student sampler step budget (e.g. 28 or 16)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the in-context instruction editor
    EditTrain,
    /// Apply an edit instruction to a source image
    EditApply,
    /// Near-duplicate removal over a corpus manifest
    Dedup,
    /// Threshold filtering over per-record quality scores
    Filter,
    /// Run the oracle and gradient self-checks
    Verify,
}

fn dispatch<T: Scalar>(cmd: &Command, cfg: &RunConfig) -> Result<Vec<Artifact>> {
    match cmd {
        Command::Pretrain => commands::pretrain::<T>(cfg, false),
        Command::Finetune => commands::pretrain::<T>(cfg, true),
        Command::Sample => commands::sample::<T>(cfg),
        Command::Distill { steps } => {
            if let Some(s) = steps {
                if *s == 0 {
                    return Err(Error::config("--steps must be at least 1"));
                }
            }
            commands::distill::<T>(cfg, *steps)
        }
        Command::EditTrain => commands::edit_train_cmd::<T>(cfg),
        Command::EditApply => commands::edit_apply_cmd::<T>(cfg),
        Command::Dedup => commands::dedup(cfg),
        Command::Filter => commands::filter(cfg),
        Command::Verify => unreachable!("verify is handled before dispatch"),
    }
}

fn run(cli: &Cli) -> Result<bool> {
    if matches!(cli.command, Command::Verify) {
        // verification always runs in f64, independent of artifact precision
        return Ok(verify::run_all());
    }
    let cfg = config::resolve(&ConfigCli {
        config_path: cli.config.as_deref(),
        sets: &cli.sets,
        seed: cli.seed,
        out: cli.out.as_deref(),
        precision: cli.precision,
    })?;
    let echoed = config::echo(&cfg)?;
    println!(
        "event=config resolved={} seed={} precision={:?} output_dir={}",
        echoed.display(),
        cfg.seed,
        cfg.precision,
        cfg.output_dir
    );
    let mut produced = match cfg.precision {
        PrecisionOpt::F32 => dispatch::<f32>(&cli.command, &cfg)?,
        PrecisionOpt::F64 => dispatch::<f64>(&cli.command, &cfg)?,
    };
    produced.push(Artifact::new("resolved-config", &echoed, "json"));
    let manifest = write_artifact_manifest(cfg.out_dir(), &produced)?;
    println!(
        "event=done artifacts={} manifest={}",
        produced.len(),
        manifest.display()
    );
    Ok(true)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Checkpoint(_) => 2,
        Error::NonFinite { .. } | Error::TrainAbort { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
