//! Synthesis for few-shot slices and construction of the mixed training sets.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, DEFAULT_MAX_LENGTH, DEFAULT_SAMPLES_PER_REQUEST, DEFAULT_TEMPERATURE};
use crate::codec::{decode_generated, encode_exemplars, AnonymizationMode, CodecError, RejectReason, SliceContext};
use crate::dataset::{slice_members, Dataset, DatasetError, Example, Partition, Provenance, SliceIndex, SplitAssignment, SplitKind};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("no many-shot slices to take a median over")]
    NoManyShotSlices,
    #[error("invalid augmentation plan: {0}")]
    Plan(String),
    #[error("slice {slice}: {source}")]
    Codec {
        slice: String,
        #[source]
        source: CodecError,
    },
    #[error("slice {slice}: {source}")]
    Backend {
        slice: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// Median train size of the many-shot slices (lower central value for an
    /// even count).
    #[default]
    MedianManyShot,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dedup {
    #[default]
    ExactText,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceTarget {
    pub current: usize,
    pub target: usize,
}

impl SliceTarget {
    pub fn deficit(&self) -> usize {
        self.target.saturating_sub(self.current)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub targets: BTreeMap<String, SliceTarget>,
    pub per_request_samples: usize,
    pub max_attempts_factor: f64,
    pub dedup: Dedup,
}

impl AugmentPlan {
    pub fn new(targets: BTreeMap<String, SliceTarget>) -> Self {
        AugmentPlan {
            targets,
            per_request_samples: DEFAULT_SAMPLES_PER_REQUEST,
            max_attempts_factor: 3.0,
            dedup: Dedup::ExactText,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.per_request_samples == 0 {
            return Err(AugmentError::Plan("per_request_samples must be at least 1".into()));
        }
        if !(self.max_attempts_factor > 1.0) {
            return Err(AugmentError::Plan("max_attempts_factor must exceed 1".into()));
        }
        Ok(())
    }

    pub fn deficit(&self, slice: &str) -> usize {
        self.targets.get(slice).map(SliceTarget::deficit).unwrap_or(0)
    }
}

/// Train-partition size of every slice.
pub fn train_slice_sizes(dataset: &Dataset, index: &SliceIndex, split: &SplitAssignment) -> BTreeMap<String, usize> {
    index
        .slice_ids()
        .map(|s| (s.to_string(), slice_members(dataset, index, split, s, Partition::Train).len()))
        .collect()
}

/// Lower median: the element at position `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[usize]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Desired total size for every few-shot slice.
pub fn compute_targets(
    train_sizes: &BTreeMap<String, usize>,
    split: &SplitAssignment,
    policy: TargetPolicy,
) -> Result<AugmentPlan, AugmentError> {
    let target = match policy {
        TargetPolicy::Fixed(n) => n,
        TargetPolicy::MedianManyShot => {
            let many: Vec<usize> = split
                .slices_of(SplitKind::ManyShot)
                .map(|s| train_sizes.get(s).copied().unwrap_or(0))
                .collect();
            lower_median(&many).ok_or(AugmentError::NoManyShotSlices)?
        }
    };
    let targets = split
        .slices_of(SplitKind::FewShot)
        .map(|s| {
            let current = train_sizes.get(s).copied().unwrap_or(0);
            (
                s.to_string(),
                SliceTarget {
                    current,
                    target: target.max(current),
                },
            )
        })
        .collect();
    Ok(AugmentPlan::new(targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub k: usize,
    pub mode: AnonymizationMode,
    pub seed: u64,
    pub temperature: f64,
    pub max_length: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            k: 10,
            mode: AnonymizationMode::Full,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceStatus {
    Ok,
    Skipped,
    Shortfall,
    NoGold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRow {
    /// The deficit this slice needed filled.
    pub requested: usize,
    pub requests: usize,
    pub generated: usize,
    pub parse_rejected: BTreeMap<RejectReason, usize>,
    pub dedup_dropped: usize,
    /// Valid outputs received after the quota was already met.
    pub overflow: usize,
    pub accepted: usize,
    pub shortfall: usize,
    pub status: SliceStatus,
}

impl AugmentRow {
    fn empty(requested: usize, status: SliceStatus) -> Self {
        AugmentRow {
            requested,
            requests: 0,
            generated: 0,
            parse_rejected: BTreeMap::new(),
            dedup_dropped: 0,
            overflow: 0,
            accepted: 0,
            shortfall: requested,
            status,
        }
    }

    pub fn rejected(&self) -> usize {
        self.parse_rejected.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub backend_id: String,
    pub wall_clock_ms: u64,
    pub slices: BTreeMap<String, AugmentRow>,
}

impl AugmentReport {
    pub fn total_shortfall(&self) -> usize {
        self.slices.values().map(|r| r.shortfall).sum()
    }
}

/// Inputs for synthesizing one slice.
pub struct SliceJob<'a> {
    pub slice_id: &'a str,
    /// Gold train examples of the slice; the only source of exemplars.
    pub gold: Vec<&'a Example>,
    pub context: SliceContext,
    pub deficit: usize,
}

/// Generate up to `job.deficit` new examples for one slice.
pub fn augment_slice(
    job: &SliceJob<'_>,
    plan: &AugmentPlan,
    backend: &dyn GenerationBackend,
    settings: &GenerationSettings,
) -> Result<(Vec<Example>, AugmentRow), AugmentError> {
    plan.validate()?;
    let slice = job.slice_id;
    if job.deficit == 0 {
        return Ok((Vec::new(), AugmentRow::empty(0, SliceStatus::Skipped)));
    }
    if job.gold.is_empty() {
        log::warn!("slice {slice}: no gold train examples to use as exemplars");
        return Ok((Vec::new(), AugmentRow::empty(job.deficit, SliceStatus::NoGold)));
    }

    let budget = (plan.max_attempts_factor * job.deficit as f64).ceil() as usize;
    let k = settings.k.max(1).min(job.gold.len());
    let mut seen: HashSet<String> = match plan.dedup {
        Dedup::ExactText => job.gold.iter().map(|e| e.text.clone()).collect(),
        Dedup::None => HashSet::new(),
    };
    let mut row = AugmentRow::empty(job.deficit, SliceStatus::Ok);
    let mut accepted: Vec<Example> = Vec::new();
    let mut samples_requested = 0usize;
    let mut seq = 0u64;

    while accepted.len() < job.deficit && samples_requested < budget {
        let n = plan.per_request_samples.min(budget - samples_requested);
        let seq_label = seq.to_string();
        let mut rng = rng_for(settings.seed, &["augment", slice, &seq_label]);
        let mut exemplars: Vec<&Example> = job.gold.choose_multiple(&mut rng, k).copied().collect();
        exemplars.shuffle(&mut rng);
        let input = encode_exemplars(&exemplars, settings.mode, &job.context).map_err(|source| AugmentError::Codec {
            slice: slice.to_string(),
            source,
        })?;
        let req = GenerationRequest {
            input: input.text,
            num_samples: n,
            max_length: settings.max_length,
            temperature: settings.temperature,
            seed: Some(derive_seed(settings.seed, &["request", slice, &seq_label])),
            slice_hint: Some(slice.to_string()),
        };
        let result = backend.generate(&req).map_err(|source| AugmentError::Backend {
            slice: slice.to_string(),
            source,
        })?;
        samples_requested += n;
        row.requests += 1;
        seq += 1;

        for output in result.outputs {
            row.generated += 1;
            if accepted.len() == job.deficit {
                row.overflow += 1;
                continue;
            }
            let mut example = match decode_generated(&output, settings.mode, &job.context) {
                Ok(e) => e,
                Err(rejection) => {
                    *row.parse_rejected.entry(rejection.reason).or_default() += 1;
                    continue;
                }
            };
            if plan.dedup == Dedup::ExactText && !seen.insert(example.text.clone()) {
                row.dedup_dropped += 1;
                continue;
            }
            example.id = format!("syn-{slice}-{:05}", accepted.len());
            example.provenance = Provenance::Synthetic;
            accepted.push(example);
        }
    }

    row.accepted = accepted.len();
    row.shortfall = job.deficit - row.accepted;
    if row.shortfall > 0 {
        row.status = SliceStatus::Shortfall;
        log::warn!(
            "slice {slice}: generation budget of {budget} exhausted with {} of {} accepted",
            row.accepted,
            job.deficit
        );
    }
    Ok((accepted, row))
}

/// The context used to encode and decode a few-shot slice: its implied
/// labels, and roles indexed over its gold train examples.
pub fn slice_context(index: &SliceIndex, slice: &str, gold: &[&Example]) -> SliceContext {
    SliceContext::from_examples(index.assignments(slice), gold.iter().copied())
}

/// Gold train examples of `slice`.
pub fn gold_train_members<'a>(
    dataset: &'a Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    slice: &str,
) -> Vec<&'a Example> {
    slice_members(dataset, index, split, slice, Partition::Train)
        .into_iter()
        .filter(|e| e.provenance == Provenance::Gold)
        .collect()
}

/// Synthesize every few-shot slice of `plan`. Slices run concurrently; each
/// slice's output depends only on its own seed stream.
pub fn augment(
    dataset: &Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    plan: &AugmentPlan,
    backend: &dyn GenerationBackend,
    settings: &GenerationSettings,
) -> Result<(Vec<Example>, AugmentReport), AugmentError> {
    plan.validate()?;
    let started = std::time::Instant::now();
    let jobs: Vec<SliceJob<'_>> = plan
        .targets
        .iter()
        .map(|(slice, target)| {
            let gold = gold_train_members(dataset, index, split, slice);
            let context = slice_context(index, slice, &gold);
            SliceJob {
                slice_id: slice,
                gold,
                context,
                deficit: target.deficit(),
            }
        })
        .collect();

    let results: Vec<Result<(Vec<Example>, AugmentRow), AugmentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|job| scope.spawn(move || augment_slice(job, plan, backend, settings)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("augmentation worker panicked"))
            .collect()
    });

    let mut synthetic = Vec::new();
    let mut slices = BTreeMap::new();
    for (job, result) in jobs.iter().zip(results) {
        let (examples, row) = result?;
        synthetic.extend(examples);
        slices.insert(job.slice_id.to_string(), row);
    }
    Ok((
        synthetic,
        AugmentReport {
            backend_id: backend.backend_id().to_string(),
            wall_clock_ms: started.elapsed().as_millis() as u64,
            slices,
        },
    ))
}

/// The dataset plus synthetic examples: gold examples untouched, synthetic ones appended.
pub fn mix_augmented(dataset: &Dataset, synthetic: &[Example]) -> Result<Dataset, AugmentError> {
    let mut mixed = dataset.clone();
    for example in synthetic {
        let mut example = example.clone();
        example.normalize().map_err(|source| DatasetError::Invalid {
            id: example.id.clone(),
            source,
        })?;
        mixed.push(example)?;
    }
    Ok(mixed)
}

/// Duplicate few-shot train examples until each few-shot slice reaches its
/// target. Every member gets `target / n` copies in total (original
/// included); the `target % n` leftover copies go to a seeded random subset.
pub fn upsample_baseline(
    dataset: &Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    plan: &AugmentPlan,
    seed: u64,
) -> Result<Dataset, AugmentError> {
    let mut out = dataset.clone();
    let mut next_copy: HashMap<String, usize> = HashMap::new();
    for (slice, target) in &plan.targets {
        let members = gold_train_members(dataset, index, split, slice);
        let n = members.len();
        if n == 0 || target.target <= n {
            continue;
        }
        let mut copies = vec![target.target / n; n];
        let mut rng = rng_for(seed, &["upsample", slice]);
        for i in rand::seq::index::sample(&mut rng, n, target.target % n) {
            copies[i] += 1;
        }
        for (example, total) in members.iter().zip(copies) {
            for _ in 1..total {
                let counter = next_copy.entry(example.id.clone()).or_insert(0);
                *counter += 1;
                let mut dup = (*example).clone();
                dup.id = format!("dup-{}-{}", example.id, counter);
                dup.provenance = Provenance::Gold;
                out.push(dup)?;
            }
        }
    }
    Ok(out)
}
