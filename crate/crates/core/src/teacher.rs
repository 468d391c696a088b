//! Teacher corpus construction.
//!
//! For every train example `e*` of every eligible many-shot slice, draw up to
//! K other examples of the same slice without replacement and emit one
//! (exemplars → target) pair. Slice priors enter as a per-instance weight.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_exemplars, encode_target, AnonymizationMode, CodecError, SliceContext};
use crate::dataset::{few_shot_example_ids, Dataset, Example, Partition, SliceIndex, SplitAssignment, SplitKind};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("invalid teacher config: {0}")]
    Config(String),
    #[error("no eligible many-shot slice: {0}")]
    EmptyCorpus(String),
    #[error("slice {slice}: {source}")]
    Codec {
        slice: String,
        #[source]
        source: CodecError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Per-instance weight ∝ prior(s) / |D_s|.
    #[default]
    Empirical,
    /// Per-instance weight ∝ 1 / |D_s|, so every slice carries equal mass.
    UniformSlices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub k: usize,
    pub mode: AnonymizationMode,
    pub seed: u64,
    pub weighting: Weighting,
    pub min_slice_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            k: 10,
            mode: AnonymizationMode::Full,
            seed: 0,
            weighting: Weighting::Empirical,
            min_slice_size: 2,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.k == 0 {
            return Err(TeacherError::Config("k must be at least 1".into()));
        }
        if self.min_slice_size < 2 {
            return Err(TeacherError::Config("min_slice_size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherInstance {
    pub input: String,
    pub target: String,
    pub weight: f64,
    pub slice_id: String,
    #[serde(skip)]
    pub target_example_id: String,
    #[serde(skip)]
    pub exemplar_ids: Vec<String>,
}

/// The many-shot slices that may feed the teacher, with their train members
/// (few-shot examples removed).
fn eligible_slices<'a>(
    dataset: &'a Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    partition: Partition,
) -> Vec<(String, Vec<&'a Example>)> {
    let few_shot = few_shot_example_ids(index, split);
    split
        .slices_of(SplitKind::ManyShot)
        .map(|slice| {
            let members = index
                .members(slice)
                .iter()
                .filter(|id| split.partition_of(id) == partition && !few_shot.contains(*id))
                .filter_map(|id| dataset.get(id))
                .collect();
            (slice.to_string(), members)
        })
        .collect()
}

fn sample_exemplars<'a>(
    pool: &[&'a Example],
    exclude: &str,
    k: usize,
    rng: &mut impl rand::Rng,
) -> Vec<&'a Example> {
    let others: Vec<&Example> = pool.iter().copied().filter(|e| e.id != exclude).collect();
    let n = k.min(others.len());
    // choose_multiple draws without replacement; the shuffle randomizes order
    let mut chosen: Vec<&Example> = others.choose_multiple(rng, n).copied().collect();
    chosen.shuffle(rng);
    chosen
}

fn normalize_weights(instances: &mut [TeacherInstance]) {
    if instances.is_empty() {
        return;
    }
    let mean = instances.iter().map(|i| i.weight).sum::<f64>() / instances.len() as f64;
    if mean > 0.0 {
        for inst in instances.iter_mut() {
            inst.weight /= mean;
        }
    }
}

fn sort_instances(instances: &mut [TeacherInstance]) {
    instances.sort_by(|a, b| {
        (a.slice_id.as_str(), a.target_example_id.as_str())
            .cmp(&(b.slice_id.as_str(), b.target_example_id.as_str()))
    });
}

/// Build the teacher training corpus from the train partition of the
/// many-shot slices.
pub fn build_teacher_corpus(
    dataset: &Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    cfg: &TeacherConfig,
) -> Result<Vec<TeacherInstance>, TeacherError> {
    cfg.validate()?;
    let slices = eligible_slices(dataset, index, split, Partition::Train);
    let mut instances = Vec::new();
    let mut skipped = Vec::new();
    for (slice, members) in &slices {
        if members.len() < cfg.min_slice_size {
            skipped.push(format!("{slice} ({} train examples)", members.len()));
            continue;
        }
        let context = SliceContext::from_examples(index.assignments(slice), members.iter().copied());
        let raw_weight = match cfg.weighting {
            Weighting::Empirical => index.prior.get(slice).copied().unwrap_or(0.0) / members.len() as f64,
            Weighting::UniformSlices => 1.0 / members.len() as f64,
        };
        let mut targets = members.clone();
        targets.sort_by(|a, b| a.id.cmp(&b.id));
        for target in targets {
            let mut rng = rng_for(cfg.seed, &["teacher", slice, &target.id]);
            let exemplars = sample_exemplars(members, &target.id, cfg.k, &mut rng);
            instances.push(make_instance(slice, target, &exemplars, cfg.mode, &context, raw_weight)?);
        }
    }
    if instances.is_empty() {
        let reason = if slices.is_empty() {
            "no many-shot slices".to_string()
        } else {
            format!(
                "every many-shot slice is below min_slice_size={}: {}",
                cfg.min_slice_size,
                skipped.join(", ")
            )
        };
        return Err(TeacherError::EmptyCorpus(reason));
    }
    if instances.iter().any(|i| i.weight <= 0.0) {
        return Err(TeacherError::Config("slice prior of zero yields a zero-weight instance".into()));
    }
    normalize_weights(&mut instances);
    sort_instances(&mut instances);
    Ok(instances)
}

/// Held-out corpus: dev examples of many-shot slices as targets, with
/// exemplars drawn from the same slice's train examples.
pub fn build_dev_corpus(
    dataset: &Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    cfg: &TeacherConfig,
) -> Result<Vec<TeacherInstance>, TeacherError> {
    cfg.validate()?;
    let train = eligible_slices(dataset, index, split, Partition::Train);
    let dev = eligible_slices(dataset, index, split, Partition::Dev);
    let mut instances = Vec::new();
    for ((slice, train_members), (_, dev_members)) in train.iter().zip(&dev) {
        if train_members.is_empty() || dev_members.is_empty() {
            continue;
        }
        let context = SliceContext::from_examples(
            index.assignments(slice),
            train_members.iter().chain(dev_members).copied(),
        );
        for target in dev_members {
            let mut rng = rng_for(cfg.seed, &["teacher-dev", slice, &target.id]);
            let exemplars = sample_exemplars(train_members, &target.id, cfg.k, &mut rng);
            instances.push(make_instance(slice, target, &exemplars, cfg.mode, &context, 1.0)?);
        }
    }
    sort_instances(&mut instances);
    Ok(instances)
}

fn make_instance(
    slice: &str,
    target: &Example,
    exemplars: &[&Example],
    mode: AnonymizationMode,
    context: &SliceContext,
    weight: f64,
) -> Result<TeacherInstance, TeacherError> {
    let codec_err = |source| TeacherError::Codec {
        slice: slice.to_string(),
        source,
    };
    let input = encode_exemplars(exemplars, mode, context).map_err(codec_err)?;
    let target_text = encode_target(target, mode, context).map_err(codec_err)?;
    Ok(TeacherInstance {
        input: input.text,
        target: target_text,
        weight,
        slice_id: slice.to_string(),
        target_example_id: target.id.clone(),
        exemplar_ids: exemplars.iter().map(|e| e.id.clone()).collect(),
    })
}

/// Write instances as JSONL ordered by slice id then target example id.
pub fn write_teacher_corpus(instances: &[TeacherInstance], path: impl AsRef<Path>) -> Result<(), TeacherError> {
    let path = path.as_ref();
    let io_err = |source| TeacherError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut sorted: Vec<&TeacherInstance> = instances.iter().collect();
    sorted.sort_by(|a, b| {
        (a.slice_id.as_str(), a.target_example_id.as_str())
            .cmp(&(b.slice_id.as_str(), b.target_example_id.as_str()))
    });
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for inst in sorted {
        let line = serde_json::to_string(inst).expect("instances always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Ids of every example that appears anywhere in the corpus, as target or
/// exemplar.
pub fn referenced_ids(instances: &[TeacherInstance]) -> BTreeSet<&str> {
    instances
        .iter()
        .flat_map(|i| std::iter::once(i.target_example_id.as_str()).chain(i.exemplar_ids.iter().map(String::as_str)))
        .collect()
}
