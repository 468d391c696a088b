//! Working directory layout, lock file and artifact manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use ex2_core::seed::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

pub const MANIFEST: &str = "manifest.jsonl";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<String>,
    pub config_hash: String,
    /// Workdir-relative path → SHA-256, for every file the stage read.
    pub input_hashes: BTreeMap<String, String>,
    /// Workdir-relative path → SHA-256, for every file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    /// Hash over `outputs`.
    pub output_hash: String,
    pub timestamp: u64,
}

pub struct Workdir {
    root: PathBuf,
    locked: bool,
}

impl Drop for Workdir {
    fn drop(&mut self) {
        if self.locked {
            let _ = fs::remove_file(self.root.join(LOCK));
        }
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn combined_hash(outputs: &BTreeMap<String, String>) -> String {
    let joined: String = outputs.iter().map(|(p, h)| format!("{p}\t{h}\n")).collect();
    sha256_hex(joined.as_bytes())
}

impl Workdir {
    /// Open `root`, creating it, and take the lock.
    pub fn open(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).with_context(|| format!("creating workdir {}", root.display()))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&lock).unwrap_or_default();
                return Err(Failure::validation(anyhow::anyhow!(
                    "workdir {} is locked by process {}; remove {} if that process is gone",
                    root.display(),
                    holder.trim(),
                    lock.display()
                )));
            }
            Err(e) => return Err(anyhow::Error::new(e).context(format!("locking {}", lock.display())).into()),
        }
        Ok(Workdir {
            root: root.to_path_buf(),
            locked: true,
        })
    }

    /// Open without locking, for read-only checks.
    pub fn open_readonly(root: &Path) -> Self {
        Workdir {
            root: root.to_path_buf(),
            locked: false,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn entries(&self) -> Result<Vec<ManifestEntry>> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(Vec::new());
        }
        fs::read_to_string(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: bad manifest line", path.display(), i + 1)))
            .collect()
    }

    pub fn latest(&self, stage: &str, fold: Option<&str>) -> Result<Option<ManifestEntry>> {
        Ok(self
            .entries()?
            .into_iter()
            .rev()
            .find(|e| e.stage == stage && e.fold.as_deref() == fold))
    }

    /// Refuse to overwrite a stage's artifacts produced under another
    /// configuration unless forced.
    pub fn check_config(&self, stage: &str, fold: Option<&str>, config_hash: &str, force: bool) -> Result<(), Failure> {
        if let Some(prev) = self.latest(stage, fold)? {
            if prev.config_hash != config_hash && !force {
                return Err(Failure::validation(anyhow::anyhow!(
                    "stage {stage} was last run with a different configuration (config hash {}, now {}); rerun with --force to overwrite",
                    short(&prev.config_hash),
                    short(config_hash)
                )));
            }
        }
        Ok(())
    }

    /// Fail with the upstream-missing code unless every path exists.
    pub fn require(&self, paths: &[PathBuf], stage: &str) -> Result<(), Failure> {
        for p in paths {
            if !p.exists() {
                return Err(Failure::upstream(anyhow::anyhow!(
                    "missing {}; run `ex2 {stage}` first",
                    self.rel(p)
                )));
            }
        }
        Ok(())
    }

    pub fn record(
        &self,
        stage: &str,
        fold: Option<&str>,
        config_hash: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<ManifestEntry> {
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((self.rel(p), file_hash(p)?))).collect()
        };
        let outputs = hash_all(outputs)?;
        let entry = ManifestEntry {
            stage: stage.to_string(),
            fold: fold.map(str::to_string),
            config_hash: config_hash.to_string(),
            input_hashes: hash_all(inputs)?,
            output_hash: combined_hash(&outputs),
            outputs,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(MANIFEST))
            .context("opening manifest")?;
        writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        Ok(entry)
    }

    /// Problems found: files not produced by any recorded stage, and
    /// recorded outputs that are missing or changed since.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut latest: BTreeMap<(String, Option<String>), ManifestEntry> = BTreeMap::new();
        for e in self.entries()? {
            latest.insert((e.stage.clone(), e.fold.clone()), e);
        }
        let mut problems = Vec::new();
        let mut known = BTreeSet::new();
        for entry in latest.values() {
            for (rel, hash) in &entry.outputs {
                known.insert(rel.clone());
                let path = self.path(rel);
                if !path.exists() {
                    problems.push(format!("{rel}: recorded by {} but missing", entry.stage));
                } else if &file_hash(&path)? != hash {
                    problems.push(format!("{rel}: changed since {} wrote it", entry.stage));
                }
            }
        }
        for file in walk(&self.root)? {
            let rel = self.rel(&file);
            if rel == MANIFEST || rel == LOCK || known.contains(&rel) {
                continue;
            }
            problems.push(format!("{rel}: not produced by any recorded stage"));
        }
        Ok(problems)
    }
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("listing {}", dir.display()))?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}
