//! Few-shot evaluation protocol: cross-validation folds over held-out
//! slices and truncation of few-shot training slices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::{assign_splits, write_dataset, Dataset, DatasetError, Example, Partition, SliceError, SliceIndex, SplitAssignment};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("truncate_to must be at least 1")]
    ZeroTruncation,
    #[error("slice {slice} has no {key:?} label to group by")]
    MissingGroupKey { slice: String, key: String },
    #[error("slice {slice} spans several {key:?} groups: {values:?}")]
    SliceSpansGroups {
        slice: String,
        key: String,
        values: Vec<String>,
    },
    #[error("unknown fold {0:?}")]
    UnknownFold(String),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossValMode {
    /// One fold per slice.
    #[default]
    PerSlice,
    /// One fold per value of the given label key; every slice in the group
    /// is few-shot together.
    PerGroup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruncationStrategy {
    #[default]
    Random,
    GreedySlotCoverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold_id: String,
    pub few_shot_slice_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossValPlan {
    pub folds: Vec<Fold>,
    pub truncate_to: usize,
    pub strategy: TruncationStrategy,
    pub seed: u64,
}

impl CrossValPlan {
    pub fn fold(&self, fold_id: &str) -> Result<&Fold, ProtocolError> {
        self.folds
            .iter()
            .find(|f| f.fold_id == fold_id)
            .ok_or_else(|| ProtocolError::UnknownFold(fold_id.to_string()))
    }
}

pub fn make_crossval_plan(
    dataset: &Dataset,
    index: &SliceIndex,
    mode: &CrossValMode,
    truncate_to: usize,
    strategy: TruncationStrategy,
    seed: u64,
) -> Result<CrossValPlan, ProtocolError> {
    if truncate_to == 0 {
        return Err(ProtocolError::ZeroTruncation);
    }
    let folds = match mode {
        CrossValMode::PerSlice => index
            .slice_ids()
            .map(|s| Fold {
                fold_id: s.to_string(),
                few_shot_slice_ids: vec![s.to_string()],
            })
            .collect(),
        CrossValMode::PerGroup(key) => {
            let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for slice in index.slice_ids() {
                let values: BTreeSet<&str> = index
                    .members(slice)
                    .iter()
                    .filter_map(|id| dataset.get(id))
                    .filter_map(|e| e.labels.get(key).map(String::as_str))
                    .collect();
                let group = match values.len() {
                    0 => {
                        return Err(ProtocolError::MissingGroupKey {
                            slice: slice.to_string(),
                            key: key.clone(),
                        })
                    }
                    1 => values.into_iter().next().expect("one value").to_string(),
                    _ => {
                        return Err(ProtocolError::SliceSpansGroups {
                            slice: slice.to_string(),
                            key: key.clone(),
                            values: values.into_iter().map(str::to_string).collect(),
                        })
                    }
                };
                groups.entry(group).or_default().push(slice.to_string());
            }
            groups
                .into_iter()
                .map(|(fold_id, few_shot_slice_ids)| Fold {
                    fold_id,
                    few_shot_slice_ids,
                })
                .collect()
        }
    };
    Ok(CrossValPlan {
        folds,
        truncate_to,
        strategy,
        seed,
    })
}

/// A slot type for coverage purposes. Span-free examples carry a single
/// `Null` slot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotKey {
    Null,
    Role(String),
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotKey::Null => f.write_str("<null>"),
            SlotKey::Role(r) => f.write_str(r),
        }
    }
}

impl Serialize for SlotKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

pub fn slot_keys(example: &Example) -> BTreeSet<SlotKey> {
    if example.spans.is_empty() {
        return BTreeSet::from([SlotKey::Null]);
    }
    example.spans.iter().map(|s| SlotKey::Role(s.role.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruncationResult {
    /// Kept ids in slice order.
    pub kept: Vec<String>,
    /// Kept ids in the order they were chosen.
    pub picks: Vec<String>,
    pub dropped_count: usize,
    /// Number of kept examples bearing each slot type.
    pub slot_coverage: BTreeMap<SlotKey, usize>,
}

fn result_from(slice: &[&Example], picks: &[usize]) -> TruncationResult {
    let keep: BTreeSet<usize> = picks.iter().copied().collect();
    let mut slot_coverage = BTreeMap::new();
    for &i in &keep {
        for key in slot_keys(slice[i]) {
            *slot_coverage.entry(key).or_insert(0) += 1;
        }
    }
    TruncationResult {
        kept: keep.iter().map(|&i| slice[i].id.clone()).collect(),
        picks: picks.iter().map(|&i| slice[i].id.clone()).collect(),
        dropped_count: slice.len() - keep.len(),
        slot_coverage,
    }
}

/// Keep a seeded uniform sample of `n` examples.
pub fn truncate_random(slice: &[&Example], n: usize, seed: u64) -> TruncationResult {
    let mut rng = rng_for(seed, &["truncate-random"]);
    let picks = rand::seq::index::sample(&mut rng, slice.len(), n.min(slice.len())).into_vec();
    result_from(slice, &picks)
}

/// Greedy slot-coverage truncation. Each step takes the slot type with the
/// fewest kept examples among types that still have unkept examples, ties
/// going to the type rarer across the whole slice and then to the
/// lexicographically smaller one, and adds a seeded-random unkept example
/// bearing it.
pub fn truncate_greedy_slot_coverage(slice: &[&Example], n: usize, seed: u64) -> TruncationResult {
    let target = n.min(slice.len());
    let keys: Vec<BTreeSet<SlotKey>> = slice.iter().map(|e| slot_keys(e)).collect();
    let mut slice_freq: BTreeMap<&SlotKey, usize> = BTreeMap::new();
    for k in keys.iter().flatten() {
        *slice_freq.entry(k).or_insert(0) += 1;
    }
    let mut kept_freq: BTreeMap<&SlotKey, usize> = slice_freq.keys().map(|k| (*k, 0)).collect();
    let mut keep = BTreeSet::new();
    let mut picks = Vec::with_capacity(target);
    let mut rng = rng_for(seed, &["truncate-greedy"]);

    while keep.len() < target {
        let choice = slice_freq
            .iter()
            .filter(|(k, _)| (0..slice.len()).any(|i| !keep.contains(&i) && keys[i].contains(**k)))
            .min_by(|(a, fa), (b, fb)| (kept_freq[*a], **fa, *a).cmp(&(kept_freq[*b], **fb, *b)))
            .map(|(k, _)| *k);
        let Some(slot) = choice else { break };
        let candidates: Vec<usize> = (0..slice.len())
            .filter(|i| !keep.contains(i) && keys[*i].contains(slot))
            .collect();
        let &pick = candidates.choose(&mut rng).expect("slot has an unkept example");
        keep.insert(pick);
        picks.push(pick);
        for k in &keys[pick] {
            *kept_freq.get_mut(k).expect("known slot") += 1;
        }
    }
    result_from(slice, &picks)
}

pub fn truncate(slice: &[&Example], n: usize, strategy: TruncationStrategy, seed: u64) -> TruncationResult {
    match strategy {
        TruncationStrategy::Random => truncate_random(slice, n, seed),
        TruncationStrategy::GreedySlotCoverage => truncate_greedy_slot_coverage(slice, n, seed),
    }
}

/// A fold's dataset: the few-shot slices' train members truncated, the
/// split marking them few-shot.
pub struct FoldData {
    pub dataset: Dataset,
    pub split: SplitAssignment,
    pub truncation: BTreeMap<String, TruncationResult>,
}

pub fn apply_fold(
    dataset: &Dataset,
    index: &SliceIndex,
    partition: &BTreeMap<String, Partition>,
    plan: &CrossValPlan,
    fold: &Fold,
) -> Result<FoldData, ProtocolError> {
    let few: BTreeSet<String> = fold.few_shot_slice_ids.iter().cloned().collect();
    let split = assign_splits(index, &few)?;
    let part = |id: &str| partition.get(id).copied().unwrap_or_default();

    let mut dropped: BTreeSet<String> = BTreeSet::new();
    let mut truncation = BTreeMap::new();
    for slice in &fold.few_shot_slice_ids {
        let members: Vec<&Example> = index
            .members(slice)
            .iter()
            .filter(|id| part(id) == Partition::Train)
            .filter_map(|id| dataset.get(id))
            .collect();
        let seed = crate::seed::derive_seed(plan.seed, &["fold", &fold.fold_id, slice]);
        let result = truncate(&members, plan.truncate_to, plan.strategy, seed);
        let kept: BTreeSet<&String> = result.kept.iter().collect();
        dropped.extend(members.iter().filter(|e| !kept.contains(&e.id)).map(|e| e.id.clone()));
        truncation.insert(slice.clone(), result);
    }
    let fold_dataset = dataset.filtered(|e| !dropped.contains(&e.id));
    let fold_partition = fold_dataset.iter().map(|e| (e.id.clone(), part(&e.id))).collect();
    Ok(FoldData {
        dataset: fold_dataset,
        split: split.with_partition(fold_partition),
        truncation,
    })
}

/// Write `{train,dev,test}.jsonl` and `split.json` into `dir`.
pub fn write_fold(dir: &Path, fold: &FoldData) -> Result<(), ProtocolError> {
    fs::create_dir_all(dir).map_err(|source| ProtocolError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for part in Partition::ALL {
        write_dataset(
            dir.join(part.file_name()),
            fold.dataset.iter().filter(|e| fold.split.partition_of(&e.id) == part),
        )?;
    }
    let split_path = dir.join("split.json");
    fs::write(&split_path, serde_json::to_string_pretty(&fold.split).expect("split serializes"))
        .map_err(|source| ProtocolError::Io {
            path: split_path,
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{slice_dataset, SlicingConfig};

    fn slot_example(id: usize, roles: &[&str]) -> Example {
        let mut text = String::new();
        let mut e = Example::new(format!("e{id:02}"), "");
        for role in roles {
            let start = text.chars().count();
            text.push_str(role);
            e.spans.push(crate::dataset::Span::new(start, start + role.len(), *role));
            text.push(' ');
        }
        text.push_str("tail");
        e.text = text;
        e
    }

    #[test]
    fn per_slice_and_per_group_folds() {
        let mut examples = Vec::new();
        for intent in 0..7 {
            examples.push(Example::new(format!("s{intent}"), "x").with_label("intent", format!("i{intent}")));
        }
        let ds = Dataset::from_examples(examples).unwrap();
        let index = slice_dataset(&ds, &SlicingConfig::by_label("intent")).unwrap();
        let plan = make_crossval_plan(&ds, &index, &CrossValMode::PerSlice, 10, TruncationStrategy::Random, 0).unwrap();
        assert_eq!(plan.folds.len(), 7);

        let mut examples = Vec::new();
        for domain in 0..10 {
            for intent in 0..15 {
                examples.push(
                    Example::new(format!("d{domain}-i{intent}"), "x")
                        .with_label("intent", format!("d{domain}-i{intent}"))
                        .with_label("domain", format!("d{domain}")),
                );
            }
        }
        let ds = Dataset::from_examples(examples).unwrap();
        let index = slice_dataset(&ds, &SlicingConfig::by_label("intent")).unwrap();
        let plan = make_crossval_plan(&ds, &index, &CrossValMode::PerGroup("domain".into()), 10, TruncationStrategy::Random, 0).unwrap();
        assert_eq!(plan.folds.len(), 10);
        assert!(plan.folds.iter().all(|f| f.few_shot_slice_ids.len() == 15));

        let one = Dataset::from_examples(vec![Example::new("a", "x").with_label("intent", "only")]).unwrap();
        let index = slice_dataset(&one, &SlicingConfig::by_label("intent")).unwrap();
        assert_eq!(make_crossval_plan(&one, &index, &CrossValMode::PerSlice, 1, TruncationStrategy::Random, 0).unwrap().folds.len(), 1);
        assert!(matches!(
            make_crossval_plan(&one, &index, &CrossValMode::PerGroup("domain".into()), 1, TruncationStrategy::Random, 0),
            Err(ProtocolError::MissingGroupKey { .. })
        ));
        assert!(matches!(
            make_crossval_plan(&one, &index, &CrossValMode::PerSlice, 0, TruncationStrategy::Random, 0),
            Err(ProtocolError::ZeroTruncation)
        ));
    }

    #[test]
    fn random_truncation() {
        let examples: Vec<Example> = (0..100).map(|i| Example::new(format!("e{i:03}"), "x")).collect();
        let slice: Vec<&Example> = examples.iter().collect();
        let r = truncate_random(&slice, 10, 3);
        assert_eq!(r.kept.len(), 10);
        assert_eq!(r.dropped_count, 90);
        assert_eq!(r, truncate_random(&slice, 10, 3));
        assert_ne!(r.kept, truncate_random(&slice, 10, 4).kept);

        let all = truncate_random(&slice[..5], 8, 1);
        assert_eq!(all.kept, vec!["e000", "e001", "e002", "e003", "e004"]);
        assert_eq!(all.dropped_count, 0);
        assert_eq!(all.slot_coverage[&SlotKey::Null], 5);
    }

    #[test]
    fn greedy_picks_the_rare_role_first() {
        let mut examples: Vec<Example> = (0..5).map(|i| slot_example(i, &["a"])).collect();
        examples.push(slot_example(5, &["b"]));
        let slice: Vec<&Example> = examples.iter().collect();
        for seed in 0..20 {
            let r = truncate_greedy_slot_coverage(&slice, 2, seed);
            assert!(r.kept.contains(&"e05".to_string()));
            assert_eq!(r.slot_coverage[&SlotKey::Role("a".into())], 1);
        }
    }

    #[test]
    fn greedy_on_span_free_slice() {
        let examples: Vec<Example> = (0..6).map(|i| slot_example(i, &[])).collect();
        let slice: Vec<&Example> = examples.iter().collect();
        let r = truncate_greedy_slot_coverage(&slice, 3, 9);
        assert_eq!(r.kept.len(), 3);
        assert_eq!(r, truncate_greedy_slot_coverage(&slice, 3, 9));
        let whole = truncate_greedy_slot_coverage(&slice, 10, 9);
        assert_eq!(whole.kept.len(), 6);
    }

    #[test]
    fn fold_application_truncates_few_shot_train_only() {
        let mut examples = Vec::new();
        let mut partition = BTreeMap::new();
        for s in ["a", "b"] {
            for i in 0..20 {
                let id = format!("{s}{i:02}");
                partition.insert(id.clone(), if i < 15 { Partition::Train } else { Partition::Test });
                examples.push(Example::new(id, format!("{s} {i}")).with_label("intent", s));
            }
        }
        let ds = Dataset::from_examples(examples).unwrap();
        let index = slice_dataset(&ds, &SlicingConfig::by_label("intent")).unwrap();
        let plan = make_crossval_plan(&ds, &index, &CrossValMode::PerSlice, 4, TruncationStrategy::Random, 1).unwrap();
        let fold = apply_fold(&ds, &index, &partition, &plan, plan.fold("b").unwrap()).unwrap();
        let train_b = fold.dataset.iter().filter(|e| e.id.starts_with('b') && fold.split.partition_of(&e.id) == Partition::Train).count();
        let test_b = fold.dataset.iter().filter(|e| e.id.starts_with('b') && fold.split.partition_of(&e.id) == Partition::Test).count();
        assert_eq!((train_b, test_b), (4, 5));
        assert_eq!(fold.dataset.iter().filter(|e| e.id.starts_with('a')).count(), 20);
        assert!(fold.split.is_few_shot("b") && !fold.split.is_few_shot("a"));

        let dir = tempfile::tempdir().unwrap();
        write_fold(dir.path(), &fold).unwrap();
        let (reloaded, part) = crate::dataset::load_partitioned(dir.path()).unwrap();
        assert_eq!(reloaded.len(), fold.dataset.len());
        assert_eq!(part.values().filter(|p| **p == Partition::Test).count(), 10);
        assert!(dir.path().join("split.json").exists());
    }
}
