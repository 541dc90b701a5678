//! Subcommands of the `cbamnet` binary.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use cbamnet_core::attention::AttentionKind;
use cbamnet_core::data::Split;
use cbamnet_core::training::OptimizerKind;
use cbamnet_core::Error;
use clap::{Parser, Subcommand};

use commands::{
    parse_size, EvalOptions, GradcheckOptions, PreprocessOptions, ReportOptions, SynthOptions,
    TrainOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "cbamnet",
    version,
    about = "Attention-augmented histopathology classifier toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled dataset tree.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Patients per class; each gets one image per magnification.
        #[arg(long, default_value_t = 25)]
        n_per_class: usize,
        /// `H` or `HxW`.
        #[arg(long, default_value = "96", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the preprocessing pipeline over a directory of images.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also export per-stage attention heatmaps from this model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "lr")]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// `sgd` or `adam`.
        #[arg(long, value_parser = parse_optimizer)]
        optimizer: Option<OptimizerKind>,
        #[arg(long)]
        patience: Option<usize>,
        /// `none`, `cbam`, `self` or `deformable`.
        #[arg(long)]
        attention: Option<AttentionKind>,
        /// Network input size, `H` or `HxW`.
        #[arg(long, value_parser = parse_size)]
        target_size: Option<(usize, usize)>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use this manifest instead of re-splitting `--data`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `train`, `val`, `test` or `all`.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitChoice,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// `all`, `cbam`, `self`, `deformable`, `se`, `mbconv` or `model`.
        #[arg(long, default_value = "all")]
        which: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Shift every analytic gradient so the check must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Verify the artifacts of a run directory against its config hash.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Accepted for uniformity; reports do not draw random numbers.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct SplitChoice(pub Option<Split>);

fn parse_split(s: &str) -> Result<SplitChoice, String> {
    if s == "all" {
        return Ok(SplitChoice(None));
    }
    s.parse()
        .map(|v| SplitChoice(Some(v)))
        .map_err(|e: cbamnet_core::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?}; expected sgd or adam")),
    }
}

/// Runs one command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    // synth reports write failures as a usage problem (bad --out), not a data error.
    let synth = matches!(cli.command, Command::Synth { .. });
    let result = match cli.command {
        Command::Synth {
            out,
            n_per_class,
            size,
            seed,
        } => commands::cmd_synth(&SynthOptions {
            out,
            n_per_class,
            size,
            seed,
        }),
        Command::Preprocess {
            input,
            out,
            config,
            checkpoint,
            seed,
        } => commands::cmd_preprocess(&PreprocessOptions {
            input,
            out,
            config,
            checkpoint,
            seed,
        }),
        Command::Train {
            data,
            config,
            out,
            seed,
            epochs,
            learning_rate,
            batch_size,
            optimizer,
            patience,
            attention,
            target_size,
            quiet,
        } => commands::cmd_train(&TrainOptions {
            data,
            config,
            out,
            seed,
            epochs,
            learning_rate,
            batch_size,
            optimizer,
            patience,
            attention,
            target_size,
            quiet,
        }),
        Command::Eval {
            checkpoint,
            data,
            manifest,
            split,
            out,
            config,
            seed,
        } => commands::cmd_eval(&EvalOptions {
            checkpoint,
            data,
            manifest,
            split: split.0,
            out,
            config,
            seed,
        }),
        Command::Gradcheck {
            which,
            seed,
            seeds,
            inject_fault,
        } => commands::cmd_gradcheck(&GradcheckOptions {
            which,
            seed,
            seeds,
            inject_fault,
        }),
        Command::Report { run, seed: _ } => commands::cmd_report(&ReportOptions { run }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } if synth => 2,
                _ => e.exit_code(),
            }
        }
    }
}
