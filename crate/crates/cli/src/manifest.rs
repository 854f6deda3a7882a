use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use oner_core::pipeline::write_atomic;
use oner_core::Result;

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub backbone: u64,
    pub train: u64,
    pub data: u64,
}

#[derive(Debug, Serialize)]
pub struct TaskTiming {
    pub task: u32,
    pub seconds: f64,
    pub final_loss: f64,
    pub ipr_status: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Summary of one `train` run, written once at the end.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seeds: Seeds,
    pub tasks: Vec<TaskTiming>,
    pub total_seconds: f64,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn path_for(experience: &Path) -> PathBuf {
        with_suffix(experience, ".manifest.json")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

pub fn artifact(path: &Path) -> Result<Artifact> {
    let bytes = fs::read(path)?;
    Ok(Artifact {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// `path` with `suffix` appended to its file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn checkpoint_path(experience: &Path, task: u32) -> PathBuf {
    with_suffix(experience, &format!(".task{task}"))
}
