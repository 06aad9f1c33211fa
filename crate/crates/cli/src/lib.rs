//! Batch front-end of `optochaos`: config handling, command execution and
//! self-describing CSV / JSON outputs.

pub mod config;
pub mod output;
pub mod plots;
pub mod run;

use std::path::{Path, PathBuf};
use std::time::Instant;

use config::{apply_overrides, finish, parse_document, to_canonical_json, Command, Format, RunConfig};
use output::{write_csv, write_json, Manifest, Outcome};

/// Environment variable fixing the worker-thread count.
pub const THREADS_ENV: &str = "OPTOCHAOS_THREADS";

pub mod exit {
    pub const OK: i32 = 0;
    pub const PARTIAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 6;
}

/// A finished run.
#[derive(Debug)]
pub struct RunReport {
    pub config: RunConfig,
    pub outcome: Outcome,
    pub files: Vec<PathBuf>,
    pub exit_code: i32,
}

#[derive(Debug)]
pub enum CliError {
    Config(config::ConfigError),
    Model(optochaos_core::Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Model(e) => run::exit_code(e),
            CliError::Io(_) => exit::IO,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "invalid configuration:\n{e}"),
            CliError::Model(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

/// Reads, overrides and validates a config file.
pub fn load_config(command: Command, path: &Path, sets: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg = parse_document(&text).map_err(|mut e| {
        e.messages.iter_mut().for_each(|m| *m = format!("{}: {m}", path.display()));
        CliError::Config(e)
    })?;
    let cfg = apply_overrides(&cfg, sets).map_err(CliError::Config)?;
    finish(cfg, command).map_err(CliError::Config)
}

/// Executes a validated config and writes its outputs.
pub fn run_config(
    command: Command,
    cfg: RunConfig,
    overrides: &[String],
    emit_plots: bool,
) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let outcome = run::execute(&cfg, command).map_err(CliError::Model)?;
    let manifest = Manifest {
        command,
        config: to_canonical_json(&cfg),
        overrides: overrides.to_vec(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let base = cfg.output_base(command);
    let io = |e: std::io::Error| CliError::Io(format!("writing {base}: {e}"));
    let mut files = Vec::new();
    if cfg.output.format == Format::Csv || emit_plots {
        files.extend(write_csv(&base, &manifest, &outcome).map_err(io)?);
    }
    files.push(write_json(&base, &manifest, &outcome).map_err(io)?);
    if emit_plots {
        let path = PathBuf::from(format!("{base}.gp"));
        std::fs::write(&path, plots::gnuplot_script(command, &base)).map_err(io)?;
        files.push(path);
    }
    let exit_code = if outcome.failures.is_empty() { exit::OK } else { exit::PARTIAL };
    Ok(RunReport {
        config: cfg,
        outcome,
        files,
        exit_code,
    })
}

/// Configures the global thread pool from [`THREADS_ENV`], if set.
pub fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV}={raw}: expected a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
