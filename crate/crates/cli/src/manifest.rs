use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest(path: &Path) -> Result<FileDigest, CliError> {
    let data = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let hash = Sha256::digest(&data);
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
        bytes: data.len() as u64,
    })
}

/// Record of one command invocation: what went in, what came out, and when.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    /// Every file under the output directory except the manifest itself, sorted by path.
    pub outputs: Vec<FileDigest>,
    /// Command-specific numbers worth keeping next to the outputs.
    pub summary: Value,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Value::Null,
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    /// Hashes everything in `out_dir` and writes the manifest there.
    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let mut files = Vec::new();
        collect_files(out_dir, &mut files)?;
        files.sort();
        self.outputs = files.iter().map(|p| digest(p)).collect::<Result<_, _>>()?;
        self.finished_at = now();
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
