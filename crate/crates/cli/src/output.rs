//! Output directory, atomic writes and run manifests.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_SUFFIX: &str = ".manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
    /// Files written by this run, relative to the output directory.
    pub outputs: Vec<String>,
    /// Resolved configuration.
    #[serde(default)]
    pub config: String,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64, config: String) -> Self {
        Self {
            command: command.into(),
            config_hash,
            tool_version: TOOL_VERSION.into(),
            seed,
            started_unix: now(),
            finished_unix: 0,
            stages: Vec::new(),
            metrics: BTreeMap::new(),
            flags: BTreeMap::new(),
            outputs: Vec::new(),
            config,
        }
    }

    pub fn stage(&mut self, name: &str, status: StageStatus, detail: impl Into<String>) {
        self.stages.push(Stage { name: name.into(), status, detail: detail.into() });
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn flag(&mut self, name: &str, value: bool) {
        self.flags.insert(name.into(), value);
    }

    pub fn failed(&self) -> Option<&Stage> {
        self.stages.iter().find(|s| s.status == StageStatus::Failed)
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}{MANIFEST_SUFFIX}")
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.message())))
    }
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Hex SHA-256 of the command, seed and resolved configuration.
pub fn config_hash(command: &str, seed: u64, canonical: &str) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(seed.to_le_bytes());
    h.update(canonical.as_bytes());
    format!("{:x}", h.finalize())
}

/// Writes into a single output directory; every file goes through here so
/// the manifest can list it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Write to a temporary sibling and rename into place.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.root.join(name), bytes)?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        self.write(name, &bytes)
    }

    /// Whitespace-separated numeric columns with a `#` header line.
    pub fn columns(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        let mut s = format!("# {}\n", header.join(" "));
        for r in rows {
            let line: Vec<String> = r.iter().map(|x| num(*x)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    /// Finalizes the manifest with the written files and stores it.
    pub fn finish(&mut self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        manifest.outputs = self.written.clone();
        manifest.finished_unix = now();
        let text = toml::to_string(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        write_atomic(&self.root.join(RunManifest::file_name(&manifest.command)), text.as_bytes())?;
        Ok(manifest)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Previous manifest for `command` if it has the same hash and all its
/// outputs are still present.
pub fn up_to_date(root: &Path, command: &str, hash: &str) -> Option<RunManifest> {
    let m = RunManifest::read(&root.join(RunManifest::file_name(command))).ok()?;
    (m.config_hash == hash && m.outputs.iter().all(|o| root.join(o).is_file())).then_some(m)
}

/// Shortest round-trip decimal form; empty for NaN.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else if x != 0.0 && x.is_finite() && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_every_part() {
        let a = config_hash("rotation", 1, "x = 1");
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash("rotation", 1, "x = 1"));
        assert_ne!(a, config_hash("reduce", 1, "x = 1"));
        assert_ne!(a, config_hash("rotation", 2, "x = 1"));
        assert_ne!(a, config_hash("rotation", 1, "x = 2"));
    }

    #[test]
    fn manifest_round_trip_and_staleness() {
        let dir = std::env::temp_dir().join(format!("qpbt-out-test-{}", std::process::id()));
        let mut out = OutputDir::create(&dir).unwrap();
        out.csv("a.csv", &["x"], &[vec!["1".into()]]).unwrap();
        let mut m = RunManifest::new("rotation", "abc".into(), 7, String::new());
        m.stage("curve", StageStatus::Ok, "");
        m.metric("n", 1.0);
        let m = out.finish(m).unwrap();
        assert_eq!(m.outputs, vec!["a.csv".to_string()]);
        assert_eq!(RunManifest::read(&dir.join("rotation.manifest.toml")).unwrap(), m);
        assert!(up_to_date(&dir, "rotation", "abc").is_some());
        assert!(up_to_date(&dir, "rotation", "abd").is_none());
        fs::remove_file(dir.join("a.csv")).unwrap();
        assert!(up_to_date(&dir, "rotation", "abc").is_none());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, -3.25e-17, 1e300, 2.0, 0.0, 1.0 / 3.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::NAN), "");
        assert_eq!(num(3.5e-17), "3.5e-17");
    }
}
