mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Temporal grounding with a fused convolutional feature pyramid.
#[derive(Debug, Parser)]
#[command(name = "simbase", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run config; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train and validation splits.
    Synth(ConfigArgs),
    /// Train on the configured splits and save a checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory; defaults to `output.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split name; defaults to `data.val_split`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scale the analytic gradient of this op (self-test of the suite).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Summarize a TVGF file, checkpoint directory or annotation file.
    Inspect { path: PathBuf },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<simbase::Error> for Failure {
    fn from(e: simbase::Error) -> Self {
        match e {
            simbase::Error::Config(_) | simbase::Error::Shape { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<config::RunConfig, Failure> {
    config::load(args.config.as_deref(), &args.set).map_err(Failure::Usage)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(args) => commands::synth(&load_config(&args)?),
        Command::Train(args) => commands::train_cmd(&load_config(&args)?),
        Command::Eval {
            config,
            checkpoint,
            split,
        } => commands::eval(&load_config(&config)?, checkpoint.as_deref(), split.as_deref()),
        Command::Gradcheck { config, corrupt } => commands::gradcheck(&load_config(&config)?, corrupt),
        Command::Inspect { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
