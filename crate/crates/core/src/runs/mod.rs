//! Run directories, manifests and the command implementations behind the
//! `sgtm` binary.
//!
//! Every output lives in a directory named by a content hash of its inputs
//! plus the seed. A directory with a `manifest.json` is complete and is
//! reused as is; a `.lock` file keeps concurrent writers out.

mod commands;

pub use commands::{
    cmd_ablate, cmd_analyze, cmd_attack, cmd_calibrate, cmd_sweep, cmd_train, AttackMode, Baseline, Report,
    SweepAxis, TrainOutcome,
};

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Where outputs go and how commands compute.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub out: PathBuf,
    pub precision: Precision,
    /// Sweep points trained concurrently.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
    pub corpus_seed: u64,
    pub label_seed: u64,
}

/// Written last, so its presence marks a directory complete; never
/// rewritten afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub precision: Precision,
    pub seeds: Seeds,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Inputs read from other directories.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    /// Every file written, relative to the directory.
    pub artifacts: Vec<PathBuf>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn code_version() -> String {
    format!("sgtm {}", env!("CARGO_PKG_VERSION"))
}

/// First 12 hex digits of the SHA-256 of `value`'s canonical JSON.
pub fn content_hash(value: &impl Serialize) -> String {
    let canonical = serde_json::to_vec(&serde_json::to_value(value).expect("hashable value")).expect("json");
    Sha256::digest(&canonical).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn read_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    match fs::read(dir.join(MANIFEST)) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| Error::Format { path: dir.join(MANIFEST), reason: e.to_string() }),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Exclusive writer access to a directory for the guard's lifetime.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An output directory being filled; records artifacts for the manifest.
pub struct OutputDir {
    pub dir: PathBuf,
    artifacts: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    started: u64,
    _lock: DirLock,
}

impl OutputDir {
    /// `Ok(None)` when the directory is already complete.
    pub fn create(dir: PathBuf) -> Result<Option<Self>> {
        if read_manifest(&dir)?.is_some() {
            return Ok(None);
        }
        let lock = DirLock::acquire(&dir)?;
        // a writer may have finished between the check and the lock
        if read_manifest(&dir)?.is_some() {
            return Ok(None);
        }
        Ok(Some(OutputDir { dir, artifacts: Vec::new(), inputs: Vec::new(), started: now_unix(), _lock: lock }))
    }

    /// Absolute path of `rel`, recorded as an artifact.
    pub fn file(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let rel = rel.as_ref().to_path_buf();
        let path = self.dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
        Ok(path)
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.file(rel)?;
        fs::write(&path, serde_json::to_vec_pretty(value)?)?;
        Ok(path)
    }

    pub fn write_csv<R: Serialize>(&mut self, rel: &str, rows: impl IntoIterator<Item = R>) -> Result<PathBuf> {
        let path = self.file(rel)?;
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(path)
    }

    pub fn finish(mut self, command: &str, config_hash: String, precision: Precision, seeds: Seeds) -> Result<RunManifest> {
        self.artifacts.sort();
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash,
            code_version: code_version(),
            precision,
            seeds,
            started_unix: self.started,
            finished_unix: now_unix(),
            inputs: std::mem::take(&mut self.inputs),
            artifacts: std::mem::take(&mut self.artifacts),
        };
        let tmp = self.dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(&tmp, self.dir.join(MANIFEST))?;
        Ok(manifest)
    }
}
