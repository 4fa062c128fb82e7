//! Run manifests and the output-directory self-audit.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_MANIFEST_FILE: &str = "sweep_manifest.json";

/// Content hash of the library sources this binary was built from.
pub const CODE_HASH: &str = env!("RELCLIP_CODE_HASH");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Run,
    Analyze,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub train: u64,
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: RunKind,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Source checkpoint of an `analyze` pass.
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub code_hash: String,
    pub started_unix: u64,
    pub wall_clock_s: f64,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// Analyses that produced output, by toggle name.
    pub analyses: Vec<String>,
    #[serde(default)]
    pub final_metrics: Option<MetricsRow>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: not a run manifest: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn has_artifact(&self, rel: &str) -> bool {
        self.artifacts.iter().any(|a| a.path == rel)
    }
}

fn rel_string(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Every file under `dir` except the manifest, as sorted relative paths.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let mut rel: Vec<String> = files.iter().map(|p| rel_string(dir, p)).filter(|r| r != MANIFEST_FILE).collect();
    rel.sort();
    Ok(rel)
}

/// Describes every file under `dir` with its size and digest.
pub fn collect_artifacts(dir: &Path) -> Result<Vec<Artifact>> {
    list_files(dir)?
        .into_iter()
        .map(|rel| {
            let p = dir.join(&rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Ok(Artifact { path: rel, bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) })
        })
        .collect()
}

/// Checks that the manifest lists exactly the files present under `dir`.
pub fn audit(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let on_disk: BTreeSet<String> = list_files(dir)?.into_iter().collect();
    let listed: BTreeSet<String> = manifest.artifacts.iter().map(|a| a.path.clone()).collect();
    let unlisted: Vec<_> = on_disk.difference(&listed).cloned().collect();
    let missing: Vec<_> = listed.difference(&on_disk).cloned().collect();
    if unlisted.is_empty() && missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "manifest audit of {}: unlisted files {unlisted:?}, missing files {missing:?}",
            dir.display()
        )))
    }
}
