//! The `tsdm` command line: synthesize, corrupt, train, recover, score,
//! time and sweep. Every run writes a manifest next to its outputs.

mod commands;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use tsdm_core::config::RunConfig;
use tsdm_core::TsdmError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Run(#[from] TsdmError),
    #[error("window {index}: {source}")]
    Window { index: usize, source: TsdmError },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) | CliError::Run(_) | CliError::Window { .. } => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tsdm",
    version,
    about = "Two-stage diffusion recovery of measurement windows"
)]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Single config override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Input windows (sets `paths.data`).
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<String>,
    /// Model checkpoint (sets `paths.model`).
    #[arg(long, global = true, value_name = "PATH")]
    pub model: Option<String>,
    /// Clean reference windows (sets `paths.truth`).
    #[arg(long, global = true, value_name = "PATH")]
    pub truth: Option<String>,
    /// Known-observed masks, 1 = present (sets `paths.mask`).
    #[arg(long, global = true, value_name = "PATH")]
    pub mask: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emit a synthetic dataset.
    Synth,
    /// Inject false data into every window.
    Attack,
    /// Drop readings according to the loss mask settings.
    Mask,
    /// Train the noise predictor.
    Train,
    /// Run two-stage recovery.
    Recover,
    /// Score recovered windows against the truth.
    Eval {
        /// Windows that were given to `recover`; enables detection scores.
        #[arg(long, value_name = "PATH")]
        corrupted: Option<String>,
        /// Trust masks written by `recover`.
        #[arg(long, value_name = "PATH")]
        outliers: Option<String>,
    },
    /// Time accelerated sampling.
    Bench,
    /// Recovery quality over a grid of one parameter.
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Attack => "attack",
            Command::Mask => "mask",
            Command::Train => "train",
            Command::Recover => "recover",
            Command::Eval { .. } => "eval",
            Command::Bench => "bench",
            Command::Sweep => "sweep",
        }
    }
}

/// Defaults, then the config file, then `--set`, then the dedicated flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let usage = |e: TsdmError| CliError::Usage(e.to_string());
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.apply(k, v).map_err(usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let paths = [
        ("paths.data", &cli.data),
        ("paths.model", &cli.model),
        ("paths.truth", &cli.truth),
        ("paths.mask", &cli.mask),
    ];
    for (key, value) in paths {
        if let Some(v) = value {
            cfg.apply(key, v).map_err(usage)?;
        }
    }
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match resolve_config(&cli).and_then(|cfg| commands::dispatch(&cli, &cfg)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("tsdm {}: {e}", cli.command.name());
            if let CliError::Usage(_) = e {
                eprintln!("Run `tsdm --help` for usage.");
            }
            e.exit_code()
        }
    }
}
