//! Command line front end: `train`, `eval`, `infer`, `verify` and
//! `profile`.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 bad
//! configuration or input, 3 training aborted on a non-finite loss.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsafdet::model::Ablation;
use dsafdet::DetError;

pub mod commands;
pub mod config;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn failed(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILED,
            msg: msg.into(),
        }
    }
}

impl From<DetError> for CliError {
    fn from(e: DetError) -> Self {
        let code = match e {
            DetError::NonFinite { .. } => EXIT_NON_FINITE,
            _ => EXIT_USAGE,
        };
        Self { code, msg: e.to_string() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "dsafdet", version, about = "Train, evaluate and profile the road-damage detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--override train.lr=0.01`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate and print the resolved configuration, then stop.
    #[arg(long)]
    pub dry_run: bool,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: DetError| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negate the gradient of bilinear sampling positions.
    BilinearGrad,
    /// Treat the first training step as producing a non-finite loss.
    Nan,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write logs and checkpoints under the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from `last.dsaf` and `state.json` in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `ckpt-best.dsaf` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the validation split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Detect objects in images.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Without a checkpoint the seeded initial weights are used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
    },
    /// Run operator, block, detector and metric self-checks.
    Verify {
        /// all, ops, blocks, detector or metrics. Repeatable.
        #[arg(long, default_value = "all")]
        scope: Vec<String>,
        /// Also write `verify.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Count parameters and FLOPs of the configured model.
    Profile {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Train {
            run,
            resume,
            inject_fault,
        } => commands::train(&run, resume, inject_fault),
        Command::Eval { run, checkpoint, split } => commands::eval(&run, checkpoint, split),
        Command::Infer {
            run,
            checkpoint,
            images,
            conf,
            iou,
        } => commands::infer(&run, checkpoint, &images, conf, iou),
        Command::Verify {
            scope,
            out,
            inject_fault,
        } => commands::verify(&scope, out, inject_fault),
        Command::Profile { run } => commands::profile(&run),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
