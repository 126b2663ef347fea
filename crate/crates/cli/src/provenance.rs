//! Run log and output-directory lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const RUN_LOG_NAME: &str = "tbvad-run.log";
pub const LOCK_NAME: &str = ".tbvad.lock";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// One line of the run log.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub timestamp: String,
    pub command: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes every input file; a missing input is an invocation error naming its flag.
pub fn digest_inputs(inputs: &[(&str, &Path)]) -> Result<BTreeMap<String, InputDigest>, Failure> {
    inputs
        .iter()
        .map(|(flag, path)| {
            let bytes = fs::read(path).map_err(|e| Failure::usage(format!("{flag} {}: {e}", path.display())))?;
            Ok((
                flag.to_string(),
                InputDigest {
                    path: path.to_path_buf(),
                    sha256: sha256_hex(&bytes),
                },
            ))
        })
        .collect()
}

pub fn append(log: &Path, record: &RunRecord) -> std::io::Result<()> {
    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(log)?;
    f.write_all(line.as_bytes())
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::runtime(format!(
                "{} exists: another run is writing to {}",
                path.display(),
                dir.display()
            ))),
            Err(e) => Err(Failure::runtime(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
