use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one successful command, written last and atomically.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub engine_version: String,
    /// `args`: every option as parsed, defaults and config-file values
    /// included. `resolved`: the model and training configs actually used.
    pub config: Value,
    pub seed: Option<u64>,
    /// Checkpoints read by the run.
    pub input_checkpoints: Vec<PathBuf>,
    /// Checkpoints written by the run.
    pub output_checkpoints: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Other files written, relative to `output_dir`.
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, output_dir: &Path) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                engine_version: nanolens::VERSION.to_string(),
                config: serde_json::json!({
                    "args": serde_json::to_value(config).unwrap_or(Value::Null),
                    "resolved": {},
                }),
                seed,
                input_checkpoints: Vec::new(),
                output_checkpoints: Vec::new(),
                output_dir: output_dir.to_path_buf(),
                outputs: Vec::new(),
                wall_clock_seconds: 0.0,
            },
        }
    }

    pub fn resolved(&mut self, key: &str, value: &impl Serialize) {
        self.manifest.config["resolved"][key] = serde_json::to_value(value).unwrap_or(Value::Null);
    }

    pub fn input_checkpoint(&mut self, p: &Path) {
        self.manifest.input_checkpoints.push(p.to_path_buf());
    }

    pub fn output_checkpoint(&mut self, p: &Path) {
        self.manifest.output_checkpoints.push(p.to_path_buf());
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.manifest.outputs.push(name.into());
    }

    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.manifest.output_dir.join(MANIFEST_FILE), &json)?;
        Ok(self.manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
