use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use umtam::checkpoint::write_report;
use umtam::Result;

/// Record of one run, written as `<output>.manifest.json`.
#[derive(Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: C,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn input(path: &Path) -> InputFile {
    let sha256 = std::fs::read(path).map(|b| sha256_hex(&b)).unwrap_or_default();
    InputFile {
        path: path.to_path_buf(),
        sha256,
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &'static str, seed: Option<u64>, config: C) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads: rayon::current_num_threads(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Write next to `primary`, the first listed output.
    pub fn write(&self, primary: &Path) -> Result<()> {
        write_report(self, &manifest_path(primary))
    }
}
