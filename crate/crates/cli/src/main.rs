//! `layer-handle`: runs layer, handle, join-path, verify and sweep pipelines
//! from a JSON config and writes one directory per config hash.
//!
//! Exit status: 0 when every check passes, 1 on a failed check, 2 on a
//! config, I/O or solver error.

mod config;
mod pipeline;
mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use config::{Mode, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(PathBuf, std::io::Error),
    Core(layer_handle::error::Error),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(path.to_path_buf(), e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<layer_handle::error::Error> for CliError {
    fn from(e: layer_handle::error::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "layer-handle", version, about = "Maximal-surface layers and handles: solve, export, verify")]
struct Args {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Parent directory of the run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Uniform mesh refinements.
    #[arg(long)]
    refine: Option<u32>,
    /// Seed of the sampled checks.
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match (&args.config, args.mode) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(mode)) => RunConfig::with_mode(mode),
        (None, None) => return Err(CliError::Config("give --config or --mode".into())),
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(k) = args.refine {
        cfg.refine = k;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match resolve(&args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pipeline::execute(&cfg) {
        Ok((dir, report)) => {
            for c in report.checks.iter().filter(|c| !c.pass) {
                eprintln!("check failed: {} (value {}, limit {})", c.name, c.value, c.limit);
            }
            if let Some(e) = &report.error {
                eprintln!("error: {e}");
            }
            println!("{} {}", serde_json::to_value(report.status).unwrap_or_default(), dir.join("report.json").display());
            ExitCode::from(report.status.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
