//! Run manifests: one jsonl line per stage invocation recording what went
//! in, what came out and what it cost.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lowres_core::trainer::{estimate_emissions, FITTED_KG_PER_DEVICE_HOUR};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(CliError::io(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    /// Digest of `base/rel`, recorded under `rel`.
    pub fn relative(base: &Path, rel: &str) -> Result<Self> {
        Ok(FileDigest {
            path: PathBuf::from(rel),
            sha256: sha256_file(&base.join(rel))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    /// The resolved configuration, enough to re-run the stage.
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the stage's output directory.
    pub outputs: Vec<FileDigest>,
    pub device_hours: f64,
    pub emissions_kg: f64,
    pub wall_clock_secs: f64,
    /// UTC seconds.
    pub finished_at: u64,
    pub version: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(stage: &str, config: serde_json::Value, seed: u64) -> Self {
        let config_hash = sha256_bytes(config.to_string().as_bytes());
        RunManifest {
            stage: stage.to_string(),
            config_hash,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            device_hours: 0.0,
            emissions_kg: 0.0,
            wall_clock_secs: 0.0,
            finished_at: 0,
            version: env!("CARGO_PKG_VERSION").to_string(),
            notes: Vec::new(),
        }
    }

    /// Sets the cost fields from elapsed wall-clock time on one device.
    pub fn set_cost(&mut self, wall_clock_secs: f64) {
        self.wall_clock_secs = wall_clock_secs;
        self.device_hours = wall_clock_secs / 3600.0;
        self.emissions_kg = estimate_emissions(self.device_hours, FITTED_KG_PER_DEVICE_HOUR).unwrap_or(0.0);
        self.finished_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
    }

    pub fn append_to(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(CliError::io(&path))?;
        let mut line = serde_json::to_vec(self)?;
        line.push(b'\n');
        f.write_all(&line).map_err(CliError::io(&path))?;
        Ok(path)
    }

    pub fn read_all(path: &Path) -> Result<Vec<RunManifest>> {
        let f = BufReader::new(File::open(path).map_err(CliError::io(path))?);
        let mut out = Vec::new();
        for line in f.lines() {
            let line = line.map_err(CliError::io(path))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn output(&self, rel: &str) -> Option<&FileDigest> {
        self.outputs.iter().find(|d| d.path == Path::new(rel))
    }
}
