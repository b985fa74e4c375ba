//! Run manifests and git-style content hashes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Written into every output location; excluded from directory hashes.
pub const MANIFEST_FILE: &str = "run.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn object_hash(kind: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind} {}\0", body.len()));
    h.update(body);
    hex(&h.finalize())
}

/// `blob` hash of a file, or `tree` hash of a directory over its sorted entries.
/// Run manifests inside directories are skipped.
pub fn content_hash(path: &Path) -> io::Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<io::Result<_>>()?;
        entries.sort();
        let mut body = Vec::new();
        for e in entries {
            let name = e.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if name == MANIFEST_FILE {
                continue;
            }
            let kind = if e.is_dir() { "tree" } else { "blob" };
            body.extend_from_slice(format!("{kind} {name}\0{}\n", content_hash(&e)?).as_bytes());
        }
        Ok(object_hash("tree", &body))
    } else {
        Ok(object_hash("blob", &fs::read(path)?))
    }
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    /// Hash over every input record, in order.
    pub input_hash: String,
    pub inputs: Vec<InputRecord>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct ManifestBuilder {
    command: String,
    started: f64,
    inputs: Vec<InputRecord>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            started: unix_now(),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            hash: content_hash(path)?,
        });
        Ok(())
    }

    pub fn finish(self, config: serde_json::Value, seed: u64, outputs: &[PathBuf], dest: &Path) -> io::Result<()> {
        let joined: Vec<u8> = self
            .inputs
            .iter()
            .flat_map(|r| format!("{}\n", r.hash).into_bytes())
            .collect();
        let m = RunManifest {
            command: self.command,
            config,
            seed,
            threads: cellsearch::parallel::threads(),
            input_hash: object_hash("inputs", &joined),
            inputs: self.inputs,
            started_unix: self.started,
            finished_unix: unix_now(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let text = serde_json::to_string_pretty(&m).map_err(io::Error::other)?;
        fs::write(dest, text + "\n")
    }
}
