//! Batch runner: parse a JSON experiment, execute it, write CSV artifacts and a manifest.

pub mod config;
pub mod oracle;
pub mod output;
pub mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::output::{sha256_hex, Artifacts, Check};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Library(#[from] qbsdej::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Reads and validates a config file, returning it with the SHA-256 of its bytes.
pub fn load(path: &Path) -> Result<(ExperimentConfig, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = config::parse(&text)?;
    Ok((cfg, sha256_hex(&bytes)))
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn finish(cfg: &ExperimentConfig, mut out: Artifacts, checks: Vec<Check>) -> Result<bool, CliError> {
    out.summary(&checks)?;
    let echo = serde_json::to_value(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let label = serde_json::to_value(cfg.experiment).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.manifest(&echo, cfg.ensemble.seed, label.as_str().unwrap_or_default(), &checks)?;
    for c in &checks {
        log::info!("{} {} = {:.6} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    Ok(checks.iter().all(|c| c.pass))
}

/// `run <config>`: returns whether every enabled check passed.
pub fn run(path: &Path, out_flag: Option<&Path>) -> Result<bool, CliError> {
    let (cfg, hash) = load(path)?;
    let mut out = Artifacts::create(&out_dir(&cfg, out_flag), &hash)?;
    let checks = run::run_experiment(&cfg, &mut out)?;
    finish(&cfg, out, checks)
}

/// `oracle <config>`: evaluates the configured oracle list regardless of the experiment kind.
pub fn oracle(path: &Path, out_flag: Option<&Path>) -> Result<bool, CliError> {
    let (cfg, hash) = load(path)?;
    if cfg.oracles.is_empty() {
        return Err(CliError::Config("no oracles configured".into()));
    }
    let mut out = Artifacts::create(&out_dir(&cfg, out_flag), &hash)?;
    let checks = run::run_oracles(&cfg, &mut out)?;
    finish(&cfg, out, checks)
}

/// `validate <config>`: parse and validate only.
pub fn validate(path: &Path) -> Result<ExperimentConfig, CliError> {
    load(path).map(|(cfg, _)| cfg)
}
