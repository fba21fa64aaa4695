use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Bumped whenever the layout of any emitted file changes.
pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    /// Relative to the output directory.
    pub file: String,
    pub format: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<OutputRecord>,
    /// Command-specific results worth seeing without opening the outputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
    /// The only field that varies between otherwise identical runs.
    pub timings: Vec<Timing>,
}

/// Everything a command writes goes through here, so nothing lands outside
/// the chosen directory and every file ends up in the manifest.
pub struct RunRecorder {
    dir: PathBuf,
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<InputDigest>,
    outputs: Vec<OutputRecord>,
    timings: Vec<Timing>,
    summary: Option<serde_json::Value>,
    clock: Instant,
}

impl RunRecorder {
    pub fn new(dir: &Path, command: &'static str, seed: Option<u64>, config: serde_json::Value) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            summary: None,
            clock: Instant::now(),
        })
    }

    /// Reads an input file, recording its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|source| shrinknet::Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(bytes)
    }

    /// Closes the current stage and starts timing the next one.
    pub fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        let ms = (now - self.clock).as_secs_f64() * 1e3;
        log::info!("{stage}: {ms:.1} ms");
        self.timings.push(Timing {
            stage: stage.to_string(),
            ms,
        });
        self.clock = now;
    }

    pub fn set_summary(&mut self, summary: serde_json::Value) {
        self.summary = Some(summary);
    }

    pub fn write(&mut self, file: &str, format: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(file);
        fs::write(&path, bytes).map_err(|source| CliError::Write { path, source })?;
        self.outputs.push(OutputRecord {
            file: file.to_string(),
            format: format!("{format}/{FORMAT_VERSION}"),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, file: &str, format: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::Encode)?;
        bytes.push(b'\n');
        self.write(file, format, &bytes)
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tool: env!("CARGO_BIN_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: self.seed,
            threads: rayon::current_num_threads(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            summary: self.summary,
            timings: self.timings,
        };
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(CliError::Encode)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|source| CliError::Write { path: path.clone(), source })?;
        Ok(path)
    }
}
