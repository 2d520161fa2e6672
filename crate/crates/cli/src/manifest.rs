//! Output directories are built in a hidden sibling and renamed into place
//! once complete, so a failed command never leaves a partial directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    /// Relative path → sha256 of every other file in the directory.
    pub files: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST_FILE {
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(())
}

/// A command's output directory under construction.
pub struct Staged {
    target: PathBuf,
    dir: TempDir,
    started: u64,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        if target.exists() && !is_replaceable(target)? {
            bail!(
                "{} exists and is not a previous run directory (no {MANIFEST_FILE}); refusing to overwrite",
                target.display()
            );
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let dir = tempfile::Builder::new()
            .prefix(&format!(".{name}.partial-"))
            .tempdir_in(&parent)
            .with_context(|| format!("creating staging directory next to {}", target.display()))?;
        Ok(Staged {
            target: target.to_path_buf(),
            dir,
            started: unix_now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes the manifest, then swaps the staged directory into place.
    pub fn commit(self, subcommand: &str, config: serde_json::Value, seed: Option<u64>) -> Result<RunManifest> {
        let mut files = BTreeMap::new();
        collect_files(self.dir.path(), self.dir.path(), &mut files)?;
        let manifest = RunManifest {
            command: std::env::args().collect(),
            subcommand: subcommand.to_string(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            files,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.path(MANIFEST_FILE), text + "\n")?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("replacing {}", self.target.display()))?;
        }
        let staged = self.dir.keep();
        fs::rename(&staged, &self.target)
            .with_context(|| format!("moving {} to {}", staged.display(), self.target.display()))?;
        Ok(manifest)
    }
}

fn is_replaceable(dir: &Path) -> Result<bool> {
    if !dir.is_dir() {
        return Ok(false);
    }
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(true);
    }
    Ok(fs::read_dir(dir)?.next().is_none())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
