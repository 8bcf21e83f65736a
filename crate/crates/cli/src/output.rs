//! Artifact files. Every CSV starts with a `# config_sha256:` comment line and
//! prints floats with 17 significant digits so values round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One pass/fail line of the run summary.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, threshold: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: threshold.into(),
            pass,
        }
    }

    pub fn flag(name: impl Into<String>, pass: bool) -> Self {
        Self::new(name, if pass { 1.0 } else { 0.0 }, "true", pass)
    }
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    file: String,
    sha256: String,
}

pub struct Artifacts {
    dir: PathBuf,
    config_hash: String,
    written: Vec<ArtifactEntry>,
}

impl Artifacts {
    pub fn create(dir: &Path, config_hash: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            written: Vec::new(),
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Writes a CSV whose body is produced by `body` after the provenance line.
    pub fn csv<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
    {
        let mut buf = Vec::new();
        writeln!(buf, "# config_sha256: {}", self.config_hash)?;
        body(&mut buf)?;
        self.put(name, &buf)
    }

    /// Writes `header` then one line per row.
    pub fn table(&mut self, name: &str, header: &str, rows: &[Vec<String>]) -> Result<(), CliError> {
        self.csv(name, |out| {
            writeln!(out, "{header}")?;
            for r in rows {
                writeln!(out, "{}", r.join(","))?;
            }
            Ok(())
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.push(ArtifactEntry {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn summary(&mut self, checks: &[Check]) -> Result<(), CliError> {
        let rows: Vec<Vec<String>> = checks
            .iter()
            .map(|c| vec![c.name.clone(), num(c.value), c.threshold.clone(), c.pass.to_string()])
            .collect();
        self.table("summary.csv", "check,value,threshold,pass", &rows)
    }

    /// Run manifest: config echo, hashes, library version and seed. Written last.
    pub fn manifest(&mut self, config: &serde_json::Value, seed: u64, experiment: &str, checks: &[Check]) -> Result<(), CliError> {
        let manifest = serde_json::json!({
            "config_sha256": self.config_hash,
            "library": "qbsdej",
            "version": env!("CARGO_PKG_VERSION"),
            "experiment": experiment,
            "seed": seed,
            "config": config,
            "artifacts": self.written,
            "checks": checks,
            "pass": checks.iter().all(|c| c.pass),
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(self.dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
