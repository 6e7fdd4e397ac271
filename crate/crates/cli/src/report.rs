//! CSV tables and the JSON sidecar that accompanies every run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// One output file, held in memory until the run succeeds.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Everything a command produced, minus timing.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub seeds: BTreeMap<String, u64>,
    /// Hex SHA-256 of the effective config in canonical JSON.
    pub config_sha256: String,
    pub result: serde_json::Value,
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: &'a str,
    seeds: &'a BTreeMap<String, u64>,
    threads: usize,
    git_revision: Option<String>,
    wall_clock_seconds: f64,
    outputs: Vec<&'a str>,
    notes: &'a [String],
    result: &'a serde_json::Value,
}

/// A table whose cells are already formatted.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn into_artifact(self, name: impl Into<String>) -> Result<Artifact, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Output(e.to_string()))?;
        Ok(Artifact {
            name: name.into(),
            bytes,
        })
    }
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let rev = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!rev.is_empty()).then_some(rev)
}

/// Write every artifact and then the sidecar into `dir`.
pub fn write_outcome(
    dir: &Path,
    command: &str,
    sidecar_name: &str,
    outcome: &Outcome,
    wall_clock_seconds: f64,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        context: format!("cannot create {}", dir.display()),
        source,
    })?;
    let mut written = Vec::new();
    for a in &outcome.artifacts {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.bytes).map_err(|source| CliError::Io {
            context: format!("cannot write {}", path.display()),
            source,
        })?;
        written.push(path);
    }
    let sidecar = Sidecar {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: &outcome.config_sha256,
        seeds: &outcome.seeds,
        threads: rayon::current_num_threads(),
        git_revision: git_revision(),
        wall_clock_seconds,
        outputs: outcome.artifacts.iter().map(|a| a.name.as_str()).collect(),
        notes: &outcome.notes,
        result: &outcome.result,
    };
    let path = dir.join(sidecar_name);
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|source| CliError::Io {
        context: format!("cannot write {}", path.display()),
        source,
    })?;
    written.push(path);
    Ok(written)
}
