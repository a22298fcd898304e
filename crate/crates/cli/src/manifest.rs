//! Run directories and the `manifest.json` written into each one.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Failure;

/// Creates the output directory: `explicit` when given, otherwise a fresh
/// `<data_dir>/runs/<UTC timestamp>-seed<seed>` (suffixed if taken).
pub fn create_run_dir(explicit: Option<PathBuf>, data_dir: &Path, seed: u64) -> Result<PathBuf, Failure> {
    if let Some(dir) = explicit {
        fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
        return Ok(dir);
    }
    let runs = data_dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Failure::data(format!("cannot create {}: {e}", runs.display())))?;
    let stem = format!("{}-seed{seed}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"));
    for n in 0.. {
        let name = if n == 0 { stem.clone() } else { format!("{stem}-{n}") };
        let dir = runs.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Failure::data(format!("cannot create {}: {e}", dir.display()))),
        }
    }
    unreachable!()
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    fn of(path: &Path, shown: String) -> Result<Self, Failure> {
        let err = |e: io::Error| Failure::data(format!("cannot hash {}: {e}", path.display()));
        Ok(Self {
            path: shown,
            bytes: fs::metadata(path).map_err(err)?.len(),
            sha256: sha256_file(path).map_err(err)?,
        })
    }
}

/// Everything needed to reproduce a run. Contains no timestamps, so two
/// runs with the same inputs and settings produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub parallel: bool,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the run directory.
    pub outputs: Vec<FileDigest>,
    pub summary: Value,
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64, config: impl Serialize) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            parallel: cfg!(feature = "parallel"),
            config: serde_json::to_value(config).expect("settings serialize"),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.push(FileDigest::of(path, path.display().to_string())?);
        Ok(())
    }

    /// Writes `contents` to `dir/name` and records it.
    pub fn output(&mut self, dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
        self.record_output(dir, name)?;
        Ok(path)
    }

    /// Records a file already written to `dir/name`.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<(), Failure> {
        self.outputs.push(FileDigest::of(&dir.join(name), name.to_string())?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
    }
}
