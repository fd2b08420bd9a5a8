use std::path::{Path, PathBuf};

use annotator::io::{sha256_file, write_atomic};
use annotator::rng::RNG_ALGORITHM;
use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// Manifest of an annotation run, inside the run directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Manifest path for other commands: `<command>.manifest.json` in `dir`.
pub fn command_manifest(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest.json"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileEntry {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::metadata(path)
            .with_context(|| format!("stat {}", path.display()))?
            .len();
        Ok(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_file(path).with_context(|| format!("hashing {}", path.display()))?,
            bytes,
        })
    }
}

/// Audit record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub rng_algorithm: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Collects inputs while a command runs, then hashes outputs and writes
/// the manifest.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    started_at: String,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            started_at: now(),
        }
    }

    pub fn config(&mut self, config: impl Serialize) -> &mut Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        let path = path.into();
        if path.is_dir() {
            // Corpus directories: hash each regular file, in name order.
            let mut files: Vec<PathBuf> = std::fs::read_dir(&path)
                .map(|rd| {
                    rd.filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.is_file())
                        .collect()
                })
                .unwrap_or_default();
            files.sort();
            self.inputs.extend(files);
        } else {
            self.inputs.push(path);
        }
        self
    }

    pub fn finish(&self, path: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        let mut inputs: Vec<FileEntry> = Vec::new();
        for p in &self.inputs {
            if p.is_file() && !inputs.iter().any(|e| Path::new(&e.path) == p) {
                inputs.push(FileEntry::of(p)?);
            }
        }
        let outputs = outputs.iter().map(|p| FileEntry::of(p)).collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            argv: std::env::args().collect(),
            config: self.config.clone(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            inputs,
            outputs,
            started_at: self.started_at.clone(),
            finished_at: now(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_every_output_with_its_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, "abc").unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "x").unwrap();
        let mut b = ManifestBuilder::start("test");
        b.config(serde_json::json!({"k": 1})).input(&input).input(&input);
        let path = b
            .finish(&dir.path().join(MANIFEST_FILE), std::slice::from_ref(&a))
            .unwrap();
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(m.inputs.len(), 1);
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(
            m.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(m.outputs[0].bytes, 3);
        assert_eq!(m.rng_algorithm, RNG_ALGORITHM);
    }
}
