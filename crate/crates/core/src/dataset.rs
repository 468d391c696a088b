//! Examples, datasets, slicing and split bookkeeping.
//!
//! A dataset is an ordered, id-unique collection of [`Example`]s. Slices are
//! (possibly overlapping) subsets selected by [`SliceRule`]s; a
//! [`SplitAssignment`] marks each slice as many-shot or few-shot and each
//! example as train, dev or test.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: example {id}: {source}")]
    InvalidExample {
        path: PathBuf,
        line: usize,
        id: String,
        #[source]
        source: ExampleError,
    },
    #[error("duplicate example id {id:?}")]
    DuplicateId { id: String },
    #[error("example {id}: {source}")]
    Invalid {
        id: String,
        #[source]
        source: ExampleError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExampleError {
    #[error("span [{start}, {end}) out of range for text of length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("span [{start}, {end}) is empty or inverted")]
    EmptySpan { start: usize, end: usize },
    #[error("span [{start}, {end}) has an empty role")]
    EmptyRole { start: usize, end: usize },
    #[error("spans [{first_start}, {first_end}) and [{second_start}, {second_end}) overlap")]
    OverlappingSpans {
        first_start: usize,
        first_end: usize,
        second_start: usize,
        second_end: usize,
    },
    #[error("example id is empty")]
    EmptyId,
}

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("slicing config has no rules")]
    NoRules,
    #[error("rule references label key {key:?} which no example carries")]
    UnknownLabelKey { key: String },
    #[error("unknown slice id {0:?}")]
    UnknownSlice(String),
    #[error("invalid slicing config: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Gold,
    Synthetic,
    SyntheticCurated,
}

/// A labeled argument inside an example's text. Offsets count Unicode
/// scalar values, half-open.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub role: String,
}

impl Span {
    pub fn new(start: usize, end: usize, role: impl Into<String>) -> Self {
        Span {
            start,
            end,
            role: role.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub spans: Vec<Span>,
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Example {
            id: id.into(),
            text: text.into(),
            spans: Vec::new(),
            labels: BTreeMap::new(),
            provenance: Provenance::Gold,
        }
    }

    pub fn with_label(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.labels.insert(key.into(), value.into());
        self
    }

    pub fn with_span(mut self, start: usize, end: usize, role: impl Into<String>) -> Self {
        self.spans.push(Span::new(start, end, role));
        self
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// The text covered by `span`, by scalar-value offsets.
    pub fn span_text(&self, span: &Span) -> String {
        self.text
            .chars()
            .skip(span.start)
            .take(span.end.saturating_sub(span.start))
            .collect()
    }

    /// Sort spans by position and check the span invariants.
    pub fn normalize(&mut self) -> Result<(), ExampleError> {
        self.spans.sort();
        self.validate()
    }

    /// Check span bounds, non-empty roles, and that spans (in their stored
    /// order) are sorted and pairwise disjoint.
    pub fn validate(&self) -> Result<(), ExampleError> {
        if self.id.is_empty() {
            return Err(ExampleError::EmptyId);
        }
        let len = self.char_len();
        for span in &self.spans {
            if span.start >= span.end {
                return Err(ExampleError::EmptySpan {
                    start: span.start,
                    end: span.end,
                });
            }
            if span.end > len {
                return Err(ExampleError::SpanOutOfRange {
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
            if span.role.is_empty() {
                return Err(ExampleError::EmptyRole {
                    start: span.start,
                    end: span.end,
                });
            }
        }
        for pair in self.spans.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(ExampleError::OverlappingSpans {
                    first_start: pair[0].start,
                    first_end: pair[0].end,
                    second_start: pair[1].start,
                    second_end: pair[1].end,
                });
            }
        }
        Ok(())
    }

    pub fn roles(&self) -> BTreeSet<&str> {
        self.spans.iter().map(|s| s.role.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
}

/// An id-unique, ordered collection of examples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a dataset, validating every example and id uniqueness.
    pub fn from_examples(examples: Vec<Example>) -> Result<Self, DatasetError> {
        let mut dataset = Dataset::new();
        for mut example in examples {
            example
                .normalize()
                .map_err(|source| DatasetError::Invalid {
                    id: example.id.clone(),
                    source,
                })?;
            dataset.push(example)?;
        }
        Ok(dataset)
    }

    /// Append an already-validated example.
    pub fn push(&mut self, example: Example) -> Result<(), DatasetError> {
        if self.by_id.contains_key(&example.id) {
            return Err(DatasetError::DuplicateId { id: example.id });
        }
        self.by_id.insert(example.id.clone(), self.examples.len());
        self.examples.push(example);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    /// Keep only examples for which `keep` holds, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(&Example) -> bool) -> Dataset {
        let examples: Vec<Example> = self.examples.iter().filter(|e| keep(e)).cloned().collect();
        let by_id = examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Dataset { examples, by_id }
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Load a JSONL dataset. Blank lines are skipped; the first bad record aborts
/// the load with its line number.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset, DatasetError> {
    let DatasetFormat::Jsonl = format;
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut dataset = Dataset::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut example: Example =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                reason: e.to_string(),
            })?;
        example
            .normalize()
            .map_err(|source| DatasetError::InvalidExample {
                path: path.to_path_buf(),
                line: line_no,
                id: example.id.clone(),
                source,
            })?;
        if dataset.contains(&example.id) {
            return Err(DatasetError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("duplicate id {:?}", example.id),
            });
        }
        dataset.push(example)?;
    }
    Ok(dataset)
}

/// Write examples as JSONL, one record per line, in the given order.
pub fn write_dataset<'a>(
    path: impl AsRef<Path>,
    examples: impl IntoIterator<Item = &'a Example>,
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for example in examples {
        let line = serde_json::to_string(example).expect("examples always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    #[default]
    Train,
    Dev,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Dev, Partition::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Partition::Train => "train.jsonl",
            Partition::Dev => "dev.jsonl",
            Partition::Test => "test.jsonl",
        }
    }
}

/// Load either a single JSONL file (every example is train) or a directory
/// holding `train.jsonl` and optionally `dev.jsonl` / `test.jsonl`.
pub fn load_partitioned(
    path: impl AsRef<Path>,
) -> Result<(Dataset, BTreeMap<String, Partition>), DatasetError> {
    let path = path.as_ref();
    if !path.is_dir() {
        let dataset = load_dataset(path, DatasetFormat::Jsonl)?;
        let partition = dataset
            .iter()
            .map(|e| (e.id.clone(), Partition::Train))
            .collect();
        return Ok((dataset, partition));
    }
    let mut dataset = Dataset::new();
    let mut partition = BTreeMap::new();
    for part in Partition::ALL {
        let file = path.join(part.file_name());
        if part != Partition::Train && !file.exists() {
            continue;
        }
        for example in load_dataset(&file, DatasetFormat::Jsonl)?.into_examples() {
            partition.insert(example.id.clone(), part);
            dataset.push(example)?;
        }
    }
    Ok((dataset, partition))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SliceRule {
    /// One slice per distinct value of `key`, named by the value.
    ByLabelValue { key: String },
    /// A single slice, named by `value`, of examples with `key == value`.
    ByLabelEquals { key: String, value: String },
    /// A single slice, named `role:<role>`, of examples carrying a span with `role`.
    ByRolePresence { role: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicingConfig {
    pub rules: Vec<SliceRule>,
    /// Unnormalized prior weights replacing the empirical slice size for the
    /// named slices.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prior_overrides: BTreeMap<String, f64>,
}

impl SlicingConfig {
    pub fn by_label(key: impl Into<String>) -> Self {
        SlicingConfig {
            rules: vec![SliceRule::ByLabelValue { key: key.into() }],
            prior_overrides: BTreeMap::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SliceError> {
        let config: SlicingConfig =
            serde_json::from_str(text).map_err(|e| SliceError::Parse(e.to_string()))?;
        if config.rules.is_empty() {
            return Err(SliceError::NoRules);
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceIndex {
    /// slice id → member ids, in dataset order.
    pub slices: BTreeMap<String, Vec<String>>,
    pub sizes: BTreeMap<String, usize>,
    pub prior: BTreeMap<String, f64>,
    /// Labels implied by membership in each slice.
    pub assignments: BTreeMap<String, BTreeMap<String, String>>,
    /// Examples that matched no rule.
    pub unmatched: Vec<String>,
}

impl SliceIndex {
    pub fn slice_ids(&self) -> impl Iterator<Item = &str> {
        self.slices.keys().map(String::as_str)
    }

    pub fn members(&self, slice_id: &str) -> &[String] {
        self.slices.get(slice_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn assignments(&self, slice_id: &str) -> BTreeMap<String, String> {
        self.assignments.get(slice_id).cloned().unwrap_or_default()
    }

    /// example id → slices containing it.
    pub fn membership(&self) -> HashMap<&str, Vec<&str>> {
        let mut map: HashMap<&str, Vec<&str>> = HashMap::new();
        for (slice, ids) in &self.slices {
            for id in ids {
                map.entry(id.as_str()).or_default().push(slice.as_str());
            }
        }
        map
    }

    /// Canonical JSON rendering; identical inputs give identical bytes.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("slice index always serializes")
    }
}

fn rule_matches(rule: &SliceRule, example: &Example) -> Option<(String, BTreeMap<String, String>)> {
    match rule {
        SliceRule::ByLabelValue { key } => example.labels.get(key).map(|value| {
            (
                value.clone(),
                BTreeMap::from([(key.clone(), value.clone())]),
            )
        }),
        SliceRule::ByLabelEquals { key, value } => (example.labels.get(key) == Some(value))
            .then(|| {
                (
                    value.clone(),
                    BTreeMap::from([(key.clone(), value.clone())]),
                )
            }),
        SliceRule::ByRolePresence { role } => example
            .spans
            .iter()
            .any(|s| &s.role == role)
            .then(|| (format!("role:{role}"), BTreeMap::new())),
    }
}

/// Group examples into slices. Slices produced by different rules under the
/// same id are merged. Priors are slice sizes (or overrides) over their sum.
pub fn slice_dataset(dataset: &Dataset, config: &SlicingConfig) -> Result<SliceIndex, SliceError> {
    if config.rules.is_empty() {
        return Err(SliceError::NoRules);
    }
    if !dataset.is_empty() {
        for rule in &config.rules {
            let key = match rule {
                SliceRule::ByLabelValue { key } | SliceRule::ByLabelEquals { key, .. } => key,
                SliceRule::ByRolePresence { .. } => continue,
            };
            if !dataset.iter().any(|e| e.labels.contains_key(key)) {
                return Err(SliceError::UnknownLabelKey { key: key.clone() });
            }
        }
    }

    let mut slices: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut assignments: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for example in dataset {
        let mut hit: BTreeSet<String> = BTreeSet::new();
        for rule in &config.rules {
            if let Some((slice, labels)) = rule_matches(rule, example) {
                assignments.entry(slice.clone()).or_default().extend(labels);
                hit.insert(slice);
            }
        }
        if hit.is_empty() {
            unmatched.push(example.id.clone());
        }
        for slice in hit {
            slices.entry(slice).or_default().push(example.id.clone());
        }
    }
    if !unmatched.is_empty() {
        log::warn!("{} examples matched no slice and were excluded", unmatched.len());
    }

    let sizes: BTreeMap<String, usize> = slices.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let weights: BTreeMap<&String, f64> = sizes
        .iter()
        .map(|(k, &n)| (k, config.prior_overrides.get(k).copied().unwrap_or(n as f64)))
        .collect();
    let total: f64 = weights.values().sum();
    let prior = weights
        .into_iter()
        .map(|(k, w)| (k.clone(), if total > 0.0 { w / total } else { 0.0 }))
        .collect();

    Ok(SliceIndex {
        slices,
        sizes,
        prior,
        assignments,
        unmatched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    ManyShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub split: BTreeMap<String, SplitKind>,
    /// Examples missing from this map are treated as train.
    #[serde(default)]
    pub partition: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn with_partition(mut self, partition: BTreeMap<String, Partition>) -> Self {
        self.partition = partition;
        self
    }

    pub fn kind(&self, slice_id: &str) -> Option<SplitKind> {
        self.split.get(slice_id).copied()
    }

    pub fn is_few_shot(&self, slice_id: &str) -> bool {
        self.kind(slice_id) == Some(SplitKind::FewShot)
    }

    pub fn slices_of(&self, kind: SplitKind) -> impl Iterator<Item = &str> {
        self.split
            .iter()
            .filter(move |(_, &k)| k == kind)
            .map(|(s, _)| s.as_str())
    }

    pub fn partition_of(&self, example_id: &str) -> Partition {
        self.partition.get(example_id).copied().unwrap_or_default()
    }
}

/// Mark `few_shot_ids` as few-shot and every other slice as many-shot.
pub fn assign_splits(
    index: &SliceIndex,
    few_shot_ids: &BTreeSet<String>,
) -> Result<SplitAssignment, SliceError> {
    if let Some(unknown) = few_shot_ids.iter().find(|id| !index.slices.contains_key(*id)) {
        return Err(SliceError::UnknownSlice(unknown.clone()));
    }
    let split = index
        .slices
        .keys()
        .map(|s| {
            let kind = if few_shot_ids.contains(s) {
                SplitKind::FewShot
            } else {
                SplitKind::ManyShot
            };
            (s.clone(), kind)
        })
        .collect();
    Ok(SplitAssignment {
        split,
        partition: BTreeMap::new(),
    })
}

/// Members of `slice_id` restricted to `partition`, in index order.
pub fn slice_members<'a>(
    dataset: &'a Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    slice_id: &str,
    partition: Partition,
) -> Vec<&'a Example> {
    index
        .members(slice_id)
        .iter()
        .filter(|id| split.partition_of(id) == partition)
        .filter_map(|id| dataset.get(id))
        .collect()
}

/// Ids that belong to at least one few-shot slice.
pub fn few_shot_example_ids(index: &SliceIndex, split: &SplitAssignment) -> BTreeSet<String> {
    split
        .slices_of(SplitKind::FewShot)
        .flat_map(|s| index.members(s).iter().cloned())
        .collect()
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn labeled(id: &str, y: &str) -> Example {
        Example::new(id, format!("text {id}")).with_label("y", y)
    }

    #[test]
    fn loads_single_record_without_spans() {
        let f = write_lines(&[r#"{"id":"e1","text":"play a song","labels":{"intent":"PlayMusic"}}"#]);
        let ds = load_dataset(f.path(), DatasetFormat::Jsonl).unwrap();
        assert_eq!(ds.len(), 1);
        let e = ds.get("e1").unwrap();
        assert!(e.spans.is_empty());
        assert_eq!(e.provenance, Provenance::Gold);
        assert_eq!(e.labels["intent"], "PlayMusic");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write_lines(&[]);
        assert!(load_dataset(f.path(), DatasetFormat::Jsonl).unwrap().is_empty());
    }

    #[test]
    fn span_past_end_names_the_id() {
        let f = write_lines(&[
            r#"{"id":"ok","text":"abc","labels":{}}"#,
            r#"{"id":"bad","text":"abc","spans":[{"start":1,"end":9,"role":"x"}],"labels":{}}"#,
        ]);
        let err = load_dataset(f.path(), DatasetFormat::Jsonl).unwrap_err();
        match &err {
            DatasetError::InvalidExample { line, id, source, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(id, "bad");
                assert!(matches!(source, ExampleError::SpanOutOfRange { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn rejects_overlap_duplicates_and_garbage() {
        let overlap = write_lines(&[
            r#"{"id":"a","text":"abcdef","spans":[{"start":0,"end":3,"role":"x"},{"start":2,"end":4,"role":"y"}],"labels":{}}"#,
        ]);
        assert!(matches!(
            load_dataset(overlap.path(), DatasetFormat::Jsonl),
            Err(DatasetError::InvalidExample { source: ExampleError::OverlappingSpans { .. }, .. })
        ));
        let dup = write_lines(&[
            r#"{"id":"a","text":"x","labels":{}}"#,
            r#"{"id":"a","text":"y","labels":{}}"#,
        ]);
        assert!(matches!(
            load_dataset(dup.path(), DatasetFormat::Jsonl),
            Err(DatasetError::Malformed { line: 2, .. })
        ));
        let garbage = write_lines(&["{not json"]);
        assert!(matches!(
            load_dataset(garbage.path(), DatasetFormat::Jsonl),
            Err(DatasetError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn offsets_count_scalar_values() {
        let e = Example::new("u", "café au lait").with_span(5, 7, "x");
        e.validate().unwrap();
        assert_eq!(e.span_text(&e.spans[0]), "au");
        let bad = Example::new("u", "né").with_span(0, 3, "x");
        assert!(bad.validate().is_err());
    }

    #[test]
    fn slices_by_label_value_with_priors() {
        let ds = Dataset::from_examples(vec![labeled("e1", "a"), labeled("e2", "a"), labeled("e3", "b")]).unwrap();
        let idx = slice_dataset(&ds, &SlicingConfig::by_label("y")).unwrap();
        assert_eq!(idx.slices["a"], vec!["e1", "e2"]);
        assert_eq!(idx.slices["b"], vec!["e3"]);
        assert!((idx.prior["a"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((idx.prior["b"] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(idx.assignments["a"]["y"], "a");
    }

    #[test]
    fn overlapping_rules_and_unmatched() {
        let ds = Dataset::from_examples(vec![
            Example::new("e1", "go to paris").with_label("intent", "travel").with_span(6, 11, "city"),
            Example::new("e2", "hello").with_label("other", "x"),
        ])
        .unwrap();
        let config = SlicingConfig {
            rules: vec![
                SliceRule::ByLabelEquals { key: "intent".into(), value: "travel".into() },
                SliceRule::ByRolePresence { role: "city".into() },
            ],
            prior_overrides: BTreeMap::new(),
        };
        let idx = slice_dataset(&ds, &config).unwrap();
        assert_eq!(idx.slices["travel"], vec!["e1"]);
        assert_eq!(idx.slices["role:city"], vec!["e1"]);
        assert_eq!(idx.unmatched, vec!["e2"]);
        assert!((idx.prior.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_label_key_is_config_error() {
        let ds = Dataset::from_examples(vec![labeled("e1", "a")]).unwrap();
        assert!(matches!(
            slice_dataset(&ds, &SlicingConfig::by_label("missing")),
            Err(SliceError::UnknownLabelKey { .. })
        ));
        assert!(SlicingConfig::from_json(r#"{"rules":[]}"#).is_err());
        let parsed = SlicingConfig::from_json(r#"{"rules":[{"kind":"by_label_value","key":"intent"}]}"#).unwrap();
        assert_eq!(parsed.rules, vec![SliceRule::ByLabelValue { key: "intent".into() }]);
    }

    #[test]
    fn prior_overrides_are_renormalized() {
        let ds = Dataset::from_examples(vec![labeled("e1", "a"), labeled("e2", "a"), labeled("e3", "b")]).unwrap();
        let mut config = SlicingConfig::by_label("y");
        config.prior_overrides.insert("b".into(), 2.0);
        let idx = slice_dataset(&ds, &config).unwrap();
        assert!((idx.prior["a"] - 0.5).abs() < 1e-12);
        assert!((idx.prior["b"] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_assignment() {
        let examples: Vec<Example> = (0..10).map(|i| labeled(&format!("e{i}"), &format!("c{i}"))).collect();
        let ds = Dataset::from_examples(examples).unwrap();
        let idx = slice_dataset(&ds, &SlicingConfig::by_label("y")).unwrap();
        let split = assign_splits(&idx, &BTreeSet::from(["c3".to_string()])).unwrap();
        assert_eq!(split.slices_of(SplitKind::ManyShot).count(), 9);
        assert_eq!(split.slices_of(SplitKind::FewShot).collect::<Vec<_>>(), vec!["c3"]);

        let none = assign_splits(&idx, &BTreeSet::new()).unwrap();
        assert_eq!(none.slices_of(SplitKind::FewShot).count(), 0);

        assert!(matches!(
            assign_splits(&idx, &BTreeSet::from(["nope".to_string()])),
            Err(SliceError::UnknownSlice(_))
        ));
    }

    #[test]
    fn partitioned_directory_load() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.jsonl"), "{\"id\":\"a\",\"text\":\"x\",\"labels\":{}}\n").unwrap();
        fs::write(dir.path().join("test.jsonl"), "{\"id\":\"b\",\"text\":\"y\",\"labels\":{}}\n").unwrap();
        let (ds, part) = load_partitioned(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(part["a"], Partition::Train);
        assert_eq!(part["b"], Partition::Test);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn priors_sum_to_one_and_cover_dataset(labels in prop::collection::vec(0u8..6, 0..60)) {
                let examples: Vec<Example> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        let e = Example::new(format!("e{i}"), "t");
                        if l == 5 { e.with_label("z", "other") } else { e.with_label("y", format!("c{l}")) }
                    })
                    .collect();
                let ds = Dataset::from_examples(examples).unwrap();
                if !ds.iter().any(|e| e.labels.contains_key("y")) {
                    return Ok(());
                }
                let idx = slice_dataset(&ds, &SlicingConfig::by_label("y")).unwrap();
                let total: f64 = idx.prior.values().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                let sum_sizes: usize = idx.sizes.values().sum();
                for (s, p) in &idx.prior {
                    prop_assert!((p - idx.sizes[s] as f64 / sum_sizes as f64).abs() < 1e-12);
                }
                let mut covered: BTreeSet<&str> = idx.slices.values().flatten().map(String::as_str).collect();
                covered.extend(idx.unmatched.iter().map(String::as_str));
                let all: BTreeSet<&str> = ds.iter().map(|e| e.id.as_str()).collect();
                prop_assert_eq!(covered, all);
                let again = slice_dataset(&ds, &SlicingConfig::by_label("y")).unwrap();
                prop_assert_eq!(idx.to_canonical_json(), again.to_canonical_json());
            }
        }
    }
}
