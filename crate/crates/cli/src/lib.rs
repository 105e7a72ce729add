//! The `edgevad` command line: argument parsing, configuration layering and
//! one function per subcommand. `main` only installs the allocator and logger.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
pub mod config;

pub use config::{resolve, Overrides, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, keys or values, or a model whose shapes do not line up.
    #[error("config: {0}")]
    Config(String),
    /// Failure while reading inputs, processing or writing outputs.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "edgevad",
    version,
    about = "Video anomaly detection with an optimized inference graph"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `pipeline.threshold=0.6`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for model initialization and training [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Without it the main result goes to stdout.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub no_fuse: bool,
    #[arg(long, global = true)]
    pub no_fp16: bool,
    #[arg(long, global = true)]
    pub no_memplan: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Score a video through the pipeline and emit JSONL records.
    Run,
    /// Measure the pipeline with and without optimization passes.
    Bench,
    /// Train the detection head on synthetic feature videos.
    Train,
    /// AUC and per-video verdicts for scored records.
    Eval {
        /// Shorthand for `--set eval.records=FILE`.
        #[arg(long, value_name = "FILE")]
        records: Option<PathBuf>,
        /// Shorthand for `--set eval.labels=FILE`.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
    },
    /// Apply the optimization passes and dump the graph and memory plan.
    Optimize,
    /// Parameter and FLOP counts of the configured models.
    Count,
}

/// Everything one invocation needs besides the settings themselves.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub out: Option<PathBuf>,
}

impl From<Cli> for RunConfig {
    fn from(cli: Cli) -> Self {
        let c = cli.common;
        let mut set = c.set;
        if let Command::Eval { records, labels } = &cli.command {
            // JSON-quoted so a path is never read as a number or literal.
            let quote = |p: &PathBuf| serde_json::Value::String(p.display().to_string()).to_string();
            set.extend(records.iter().map(|p| format!("eval.records={}", quote(p))));
            set.extend(labels.iter().map(|p| format!("eval.labels={}", quote(p))));
        }
        RunConfig {
            command: cli.command,
            config: c.config,
            overrides: Overrides {
                set,
                seed: c.seed,
                no_fuse: c.no_fuse,
                no_fp16: c.no_fp16,
                no_memplan: c.no_memplan,
            },
            out: c.out,
        }
    }
}

fn load_settings(rc: &RunConfig) -> Result<Settings, CliError> {
    let file = match &rc.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    resolve(file, &rc.overrides)
}

pub fn execute(rc: &RunConfig) -> Result<(), CliError> {
    let settings = load_settings(rc)?;
    let out = rc.out.as_deref();
    match &rc.command {
        Command::Run => commands::run(&settings, out),
        Command::Bench => commands::bench(&settings, out),
        Command::Train => commands::train(&settings, out),
        Command::Eval { .. } => commands::eval(&settings, out),
        Command::Optimize => commands::optimize(&settings, out),
        Command::Count => commands::count(&settings, out),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 2 usage or config error, 3 runtime error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match execute(&RunConfig::from(cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
