//! Command-line front end: `gen-data`, `train`, `eval`, `report`, `selftest`.

pub mod commands;
pub mod config;

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mmda_core::error::MmdaError;

use crate::config::{extract_overrides, RunConfig};

/// Exit status and code used for command-line usage errors.
pub const USAGE_CODE: u32 = 7;

#[derive(Debug, Parser)]
#[command(
    name = "mmda",
    version,
    about = "Multimodal face anti-spoofing with denoising attention and text-space alignment",
    after_help = "Any configuration key can be overridden with --section.key=value (for example \
                  --train.epochs=2 or --udsa.exit=fixed:0); --seed=N sets the master seed. \
                  Precedence: defaults < config file < MMDA_SEED < flags."
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic domains as manifests plus tensor files.
    GenData,
    /// Train one model per training-domain set of the protocol.
    Train {
        /// Dataset root; defaults to <out>/data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the protocol with trained checkpoints and write a report.
    Eval {
        /// Dataset root; defaults to <out>/data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Aggregate report.json files (or directories holding them).
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Aggregate even when config hashes differ.
        #[arg(long)]
        force: bool,
        /// Write the table here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the analytic invariant suite.
    Selftest,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] MmdaError),
    #[error("usage error: {0}")]
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> u32 {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => USAGE_CODE,
        }
    }
}

/// What a successful run printed and whether the process should exit 0.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub success: bool,
}

/// Parses `args` (including the program name) and runs the command.
/// `env_seed` is the value of `MMDA_SEED`, if set.
pub fn run(args: Vec<String>, env_seed: Option<&str>) -> Result<Outcome, CliError> {
    let (rest, mut overrides) = extract_overrides(args, &["config", "out", "data", "resume", "force", "output"])?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return Ok(Outcome {
                stdout: e.to_string(),
                success: true,
            });
        }
        Err(e) => return Err(CliError::Usage(e.to_string().trim_end().to_owned())),
    };
    if let Some(out) = &cli.out {
        overrides.push(("out_dir".into(), toml_string(&out.display().to_string())));
    }
    let load = || -> Result<_, CliError> {
        let cfg = RunConfig::load(cli.config.as_deref(), env_seed, &overrides)?;
        Ok(cfg.resolve()?)
    };
    let mut stdout = String::new();
    match cli.command {
        Command::GenData => {
            let cfg = load()?;
            for p in commands::gen_data(&cfg)? {
                stdout.push_str(&format!("{}\n", p.display()));
            }
        }
        Command::Train { data, resume } => {
            let cfg = load()?;
            let root = data.unwrap_or_else(|| commands::data_dir(&cfg));
            let ws = commands::load_workspace(&cfg, &root)?;
            for p in commands::train_all(&cfg, &ws, resume)? {
                stdout.push_str(&format!("{}\n", p.display()));
            }
        }
        Command::Eval { data } => {
            let cfg = load()?;
            let root = data.unwrap_or_else(|| commands::data_dir(&cfg));
            let ws = commands::load_workspace(&cfg, &root)?;
            stdout.push_str(&commands::eval(&cfg, &ws)?.to_csv());
        }
        Command::Report { reports, force, output } => {
            let table = commands::aggregate(&reports, force)?;
            match output {
                Some(p) => fs::write(&p, &table).map_err(|e| MmdaError::io(&p, e))?,
                None => stdout.push_str(&table),
            }
        }
        Command::Selftest => {
            let (lines, ok) = commands::selftest();
            for l in lines {
                stdout.push_str(&l);
                stdout.push('\n');
            }
            return Ok(Outcome { stdout, success: ok });
        }
    }
    Ok(Outcome { stdout, success: true })
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_owned()).to_string()
}
