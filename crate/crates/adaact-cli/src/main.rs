//! Command-line surface: corpus generation, training, decoding, evaluation.
//!
//! Exit codes: 0 success, 1 runtime error, 2 configuration error.
//! `ADAACT_LOG` (error|info|debug) controls logging.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "adaact", version, about = "Transcript-supervised action segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Config file of `key = value` lines (# comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonOpts {
    fn run_config(&self) -> Result<RunConfig, ConfigError> {
        RunConfig::load(self.config.as_deref(), &self.set, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Datagen {
        #[command(flatten)]
        common: CommonOpts,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus (default split: train).
    Train {
        #[command(flatten)]
        common: CommonOpts,
        corpus_dir: PathBuf,
        /// Output checkpoint path; a training log lands at <out>.log.csv.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode with grammar search (segmentation task).
    Segment {
        #[command(flatten)]
        common: CommonOpts,
        checkpoint: PathBuf,
        corpus_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel decode workers.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Decode against each video's own transcript (alignment task).
    Align {
        #[command(flatten)]
        common: CommonOpts,
        checkpoint: PathBuf,
        corpus_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score a prediction file against ground truth labels.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        pred_file: PathBuf,
        gt_dir: PathBuf,
        /// Metrics JSON (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Datagen { common, out } => {
            let cfg = common.run_config()?;
            commands::cmd_datagen(&cfg, &out)
        }
        Command::Train {
            common,
            corpus_dir,
            out,
            resume,
        } => {
            let cfg = common.run_config()?;
            commands::cmd_train(&cfg, &corpus_dir, &out, resume.as_deref())
        }
        Command::Segment {
            common,
            checkpoint,
            corpus_dir,
            out,
            jobs,
        } => {
            let cfg = common.run_config()?;
            commands::cmd_decode(&cfg, &checkpoint, &corpus_dir, &out, false, jobs)
        }
        Command::Align {
            common,
            checkpoint,
            corpus_dir,
            out,
            jobs,
        } => {
            let cfg = common.run_config()?;
            commands::cmd_decode(&cfg, &checkpoint, &corpus_dir, &out, true, jobs)
        }
        Command::Eval {
            common,
            pred_file,
            gt_dir,
            out,
        } => {
            let cfg = common.run_config()?;
            commands::cmd_eval(&cfg, &pred_file, &gt_dir, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADAACT_LOG", "error")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
