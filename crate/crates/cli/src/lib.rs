//! Command-line experiments over the `dyvm` library.
//!
//! Every command returns an [`Outcome`]: the rendered report and whether the
//! invariants it checks held. Reports contain no timestamps or paths, so a
//! fixed `(command, config, seed)` always renders the same bytes.

pub mod commands;
mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dyvm::vim::ModelConfig;

pub use error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dyvm", version, about = "Token pruning and block selection experiments for vision state-space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare train-time and inference-time outputs of the masking strategies.
    Consistency(commands::consistency::ConsistencyArgs),
    /// Analytic operation counts over a grid of ratios.
    Flops(commands::flops::FlopsArgs),
    /// Run the model in both layouts and report masks, gates and deviation.
    Forward(commands::forward::ForwardArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(commands::gradcheck::GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Flags shared by every command.
#[derive(Clone, Debug, Args)]
pub struct CommonArgs {
    /// Model configuration JSON; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named architecture.
    #[arg(long, value_parser = dyvm::vim::config::PRESETS)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub token_ratio: Option<f64>,
    #[arg(long)]
    pub block_ratio: Option<f64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

/// Resolved inputs of one run.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub command: &'static str,
    pub config: ModelConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl CommonArgs {
    pub fn resolve(&self, command: &'static str, default_preset: &str, default_format: Format) -> Result<ExperimentSpec, CliError> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => ModelConfig::from_path(path)?,
            (None, Some(p)) => ModelConfig::preset(p)?,
            (None, None) => ModelConfig::preset(default_preset)?,
        };
        let t = self.token_ratio.unwrap_or(config.token_ratio);
        let b = self.block_ratio.unwrap_or(config.block_ratio);
        config = config.with_ratios(t, b)?;
        Ok(ExperimentSpec {
            command,
            config,
            seed: self.seed,
            out: self.out.clone(),
            format: self.format.unwrap_or(default_format),
        })
    }
}

/// A rendered report and whether every checked invariant held.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub body: String,
    pub passed: bool,
    pub out: Option<PathBuf>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_VIOLATION
        }
    }

    /// Writes the report to its destination, or to `stdout` when none.
    pub fn emit(&self) -> Result<(), CliError> {
        match &self.out {
            Some(path) => write_report(path, &self.body),
            None => {
                print!("{}", self.body);
                Ok(())
            }
        }
    }
}

fn write_report(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Consistency(a) => commands::consistency::run(a),
        Command::Flops(a) => commands::flops::run(a),
        Command::Forward(a) => commands::forward::run(a),
        Command::Gradcheck(a) => commands::gradcheck::run(a),
    }
}

/// Pretty JSON with a trailing newline.
pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(dyvm::Error::from)?;
    s.push('\n');
    Ok(s)
}
