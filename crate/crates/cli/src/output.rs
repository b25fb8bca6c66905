//! Atomic file output and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes files into one directory via temp file + rename and remembers
/// every path for the manifest.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        // A stale manifest would claim a completed run.
        let stale = dir.join(MANIFEST_NAME);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| CliError::io(&stale, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        atomic_write(&self.path(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes the manifest last; its presence marks a completed run.
    pub fn finish(self, manifest: RunManifest) -> Result<(), CliError> {
        let manifest = RunManifest {
            outputs: self.written.clone(),
            ..manifest
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        text.push('\n');
        atomic_write(&self.path(MANIFEST_NAME), text.as_bytes())
    }
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// `manifest.json`. The only output that carries wall-clock time.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub outputs: Vec<String>,
    pub master_seed: u64,
    pub tool_version: String,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        mode: Option<&str>,
        config: &impl Serialize,
        inputs: Vec<String>,
        out: &Path,
        master_seed: u64,
        started: Instant,
    ) -> Self {
        Self {
            subcommand: subcommand.into(),
            mode: mode.map(str::to_string),
            config: serde_json::to_value(config).expect("config serialises"),
            inputs,
            output_dir: out.display().to_string(),
            outputs: Vec::new(),
            master_seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        }
    }
}
