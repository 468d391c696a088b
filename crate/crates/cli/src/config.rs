//! Pipeline configuration: one JSON file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ex2_core::augment::{Dedup, TargetPolicy};
use ex2_core::backend::{RemoteConfig, DEFAULT_MAX_LENGTH, DEFAULT_SAMPLES_PER_REQUEST, DEFAULT_TEMPERATURE};
use ex2_core::codec::StudentTask;
use ex2_core::dataset::SlicingConfig;
use ex2_core::protocol::{CrossValMode, TruncationStrategy};
use ex2_core::seed::sha256_hex;
use ex2_core::teacher::TeacherConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// JSONL file (all train) or a directory of train/dev/test JSONL files.
    pub dataset: PathBuf,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: StudentTask,
    pub slicing: SlicingConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub backend: BackendConfig,
}

fn default_task() -> StudentTask {
    StudentTask::Classification
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Explicit few-shot slices. When set, there is a single fold, `main`.
    pub few_shot: Option<Vec<String>>,
    /// Cross-validation folds when `few_shot` is absent.
    pub mode: CrossValMode,
    /// Few-shot train slices are truncated to this size; defaults to the
    /// teacher's K.
    pub truncate_to: Option<usize>,
    pub strategy: TruncationStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub policy: TargetPolicy,
    pub per_request_samples: usize,
    pub max_attempts_factor: f64,
    pub dedup: Dedup,
    pub temperature: f64,
    pub max_length: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            policy: TargetPolicy::MedianManyShot,
            per_request_samples: DEFAULT_SAMPLES_PER_REQUEST,
            max_attempts_factor: 3.0,
            dedup: Dedup::ExactText,
            temperature: DEFAULT_TEMPERATURE,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Stub,
    Oracle {
        /// JSONL examples, sliced with the dataset's slicing rules.
        pool: PathBuf,
    },
    Remote {
        /// Falls back to `EX2_GEN_ENDPOINT`.
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        timeout_ms: Option<u64>,
        #[serde(default)]
        max_concurrency: Option<usize>,
    },
}

impl BackendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BackendConfig::Stub => "stub",
            BackendConfig::Oracle { .. } => "oracle",
            BackendConfig::Remote { .. } => "remote",
        }
    }

    pub fn remote_config(&self) -> Result<RemoteConfig> {
        let BackendConfig::Remote {
            endpoint,
            timeout_ms,
            max_concurrency,
        } = self
        else {
            bail!("backend is not remote");
        };
        let mut cfg = match (endpoint, RemoteConfig::from_env()) {
            (Some(url), env) => {
                let mut cfg = RemoteConfig::new(url);
                cfg.bearer_token = env.and_then(|e| e.bearer_token);
                cfg
            }
            (None, Some(env)) => env,
            (None, None) => bail!(
                "remote backend needs an endpoint: set backend.endpoint or {}",
                ex2_core::backend::ENDPOINT_ENV
            ),
        };
        if let Some(t) = timeout_ms {
            cfg.timeout_ms = *t;
        }
        if let Some(c) = max_concurrency {
            cfg.max_concurrency = *c;
        }
        Ok(cfg)
    }
}

/// Remove `//`-prefixed keys at every depth.
fn strip_comments(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.retain(|k, _| !k.starts_with("//"));
            map.values_mut().for_each(strip_comments);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_comments),
        _ => {}
    }
}

/// Apply `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {assignment:?} has an empty key");
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let map = node
            .as_object_mut()
            .with_context(|| format!("cannot set {path}: {key} is inside a non-object"))?;
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .with_context(|| format!("cannot set {path}: parent is not an object"))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub struct LoadedConfig {
    pub config: PipelineConfig,
    /// SHA-256 of the canonical JSON (comments removed, keys sorted).
    pub hash: String,
}

/// Read, strip comments, apply overrides, resolve relative paths against
/// the config file's directory, and hash.
pub fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    strip_comments(&mut value);
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut value, &format!("seed={seed}"))?;
    }
    let mut config: PipelineConfig =
        serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
    if config.slicing.rules.is_empty() {
        bail!("slicing.rules must not be empty");
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    config.dataset = resolve(&config.dataset);
    config.workdir = config.workdir.as_deref().map(resolve);
    if let BackendConfig::Oracle { pool } = &mut config.backend {
        *pool = resolve(pool);
    }
    if !config.dataset.exists() {
        bail!("dataset {} does not exist", config.dataset.display());
    }
    if let BackendConfig::Oracle { pool } = &config.backend {
        if !pool.is_file() {
            bail!("oracle pool {} does not exist", pool.display());
        }
    }
    // hash the resolved form so the same run from another cwd matches
    let canonical = serde_json::to_string(&serde_json::to_value(&config)?)?;
    Ok(LoadedConfig {
        hash: sha256_hex(canonical.as_bytes()),
        config,
    })
}
