//! Run directory bookkeeping and the reproducibility manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tsdm_core::config::RunConfig;
use tsdm_core::denoiser::CHECKPOINT_VERSION;

use crate::CliError;

/// Files whose names start with this hold wall-clock measurements. They are
/// written but left out of the manifest, which must be reproducible.
pub const TIMING_PREFIX: &str = "timing";

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    checkpoint_format: u32,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    inputs: &'a [FileEntry],
    outputs: &'a [FileEntry],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct RunDir {
    dir: PathBuf,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Reads an input file and records its hash under `role`.
    pub fn read_input(&mut self, role: &str, path: &str) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
        self.inputs.push(FileEntry {
            name: role.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn read_input_text(&mut self, role: &str, path: &str) -> Result<String, CliError> {
        String::from_utf8(self.read_input(role, path)?)
            .map_err(|_| CliError::Io(format!("{path}: not UTF-8 text")))
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let bytes = bytes.as_ref();
        fs::write(self.dir.join(name), bytes)?;
        if !name.starts_with(TIMING_PREFIX) {
            self.outputs.push(FileEntry {
                name: name.to_string(),
                sha256: sha256_hex(bytes),
            });
        }
        Ok(())
    }

    /// Writes `config.txt` and the manifest. Rerunning with
    /// `--config config.txt` and the same inputs reproduces every output.
    pub fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
        let text = cfg.to_text();
        self.write("config.txt", &text)?;
        let manifest = Manifest {
            tool: "tsdm",
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: CHECKPOINT_VERSION,
            command,
            seed: cfg.seed,
            config_sha256: sha256_hex(text.as_bytes()),
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.dir.join(MANIFEST), json + "\n")?;
        Ok(())
    }
}
