use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use shine_core::{io, Result};

pub const FILE: &str = "run_manifest.json";

/// Manifest path for a command whose output is a single file.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

#[derive(Debug, Serialize)]
pub struct Input {
    pub path: PathBuf,
    pub sha256: String,
}

/// What a mutating command did, with enough detail to replay it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub arguments: Value,
    /// Resolved configuration where it differs from the arguments.
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Input>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str, args: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            arguments: serde_json::to_value(args).unwrap_or(Value::Null),
            config: Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Input {
            path: path.to_path_buf(),
            sha256: io::tree_digest(path)?,
        });
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now();
        io::write_json(path, &self)
    }
}
