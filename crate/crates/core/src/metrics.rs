//! Student scoring over the overall and few-shot views, and a small
//! naive Bayes reference student.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_student_prediction, encode_student, CodecError, PredictedOutput, StudentTask};
use crate::dataset::{Dataset, Example, Partition, SliceIndex, Span, SplitAssignment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_slot_f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-label F1 for every label that occurs in `golds`. A missing
/// prediction is simply wrong.
pub fn per_label_f1(golds: &[&str], preds: &[Option<&str>]) -> BTreeMap<String, f64> {
    assert_eq!(golds.len(), preds.len(), "one prediction per gold label");
    let mut counts: BTreeMap<&str, [usize; 3]> = golds.iter().map(|g| (*g, [0; 3])).collect();
    for (gold, pred) in golds.iter().zip(preds) {
        if *pred == Some(*gold) {
            counts.get_mut(gold).expect("gold label")[0] += 1;
            continue;
        }
        counts.get_mut(gold).expect("gold label")[2] += 1;
        if let Some(row) = pred.and_then(|p| counts.get_mut(p)) {
            row[1] += 1;
        }
    }
    counts
        .into_iter()
        .map(|(label, [tp, fp, fn_])| (label.to_string(), f1_from(tp, fp, fn_)))
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn score_classification(golds: &[&str], preds: &[Option<&str>]) -> MetricSet {
    let correct = golds.iter().zip(preds).filter(|(g, p)| **p == Some(**g)).count();
    MetricSet {
        accuracy: ratio(correct, golds.len()),
        macro_f1: mean(per_label_f1(golds, preds).into_values()),
        intent_accuracy: None,
        micro_slot_f1: None,
    }
}

/// Gold or predicted slot-filling output for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotAnnotation {
    pub intent: String,
    pub spans: Vec<Span>,
}

/// Pooled true positives, predicted count and gold count.
fn span_counts(golds: &[SlotAnnotation], preds: &[Option<SlotAnnotation>]) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut predicted = 0;
    let mut gold_total = 0;
    for (gold, pred) in golds.iter().zip(preds) {
        gold_total += gold.spans.len();
        let Some(pred) = pred else { continue };
        predicted += pred.spans.len();
        let mut remaining: HashMap<(usize, usize, &str), usize> = HashMap::new();
        for s in &gold.spans {
            *remaining.entry((s.start, s.end, s.role.as_str())).or_insert(0) += 1;
        }
        for s in &pred.spans {
            if let Some(n) = remaining.get_mut(&(s.start, s.end, s.role.as_str())) {
                if *n > 0 {
                    *n -= 1;
                    tp += 1;
                }
            }
        }
    }
    (tp, predicted, gold_total)
}

pub fn micro_slot_f1(golds: &[SlotAnnotation], preds: &[Option<SlotAnnotation>]) -> f64 {
    let (tp, predicted, gold) = span_counts(golds, preds);
    match (gold, predicted) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => f1_from(tp, predicted - tp, gold - tp),
    }
}

/// Intent accuracy and macro F1 over intents, plus pooled slot F1. An
/// unparsable prediction is `None`: wrong intent, no spans.
pub fn score_slot_filling(golds: &[SlotAnnotation], preds: &[Option<SlotAnnotation>]) -> MetricSet {
    let gold_intents: Vec<&str> = golds.iter().map(|g| g.intent.as_str()).collect();
    let pred_intents: Vec<Option<&str>> = preds.iter().map(|p| p.as_ref().map(|p| p.intent.as_str())).collect();
    let intents = score_classification(&gold_intents, &pred_intents);
    MetricSet {
        intent_accuracy: Some(intents.accuracy),
        micro_slot_f1: Some(micro_slot_f1(golds, preds)),
        ..intents
    }
}

/// A trained student mapping student inputs to output strings.
pub trait Student {
    fn predict(&self, input: &str) -> Option<String>;
}

/// Multinomial naive Bayes over lowercased alphanumeric tokens with add-one
/// smoothing. Ties go to the lexicographically smallest label.
#[derive(Debug, Clone)]
pub struct NaiveBayes {
    labels: Vec<String>,
    log_prior: Vec<f64>,
    token_counts: Vec<HashMap<String, usize>>,
    totals: Vec<usize>,
    vocab: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl NaiveBayes {
    pub fn fit<I, S, L>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, L)>,
        S: AsRef<str>,
        L: Into<String>,
    {
        let mut by_label: BTreeMap<String, (usize, HashMap<String, usize>)> = BTreeMap::new();
        let mut vocab = BTreeSet::new();
        for (input, label) in pairs {
            let entry = by_label.entry(label.into()).or_default();
            entry.0 += 1;
            for token in tokenize(input.as_ref()) {
                vocab.insert(token.clone());
                *entry.1.entry(token).or_insert(0) += 1;
            }
        }
        let n: usize = by_label.values().map(|(c, _)| c).sum();
        let mut model = NaiveBayes {
            labels: Vec::new(),
            log_prior: Vec::new(),
            token_counts: Vec::new(),
            totals: Vec::new(),
            vocab: vocab.len(),
        };
        for (label, (count, tokens)) in by_label {
            model.labels.push(label);
            model.log_prior.push((count as f64 / n as f64).ln());
            model.totals.push(tokens.values().sum());
            model.token_counts.push(tokens);
        }
        model
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn predict_label(&self, input: &str) -> Option<&str> {
        let tokens = tokenize(input);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.labels.len() {
            let denom = (self.totals[i] + self.vocab) as f64;
            let score = self.log_prior[i]
                + tokens
                    .iter()
                    .map(|t| ((self.token_counts[i].get(t).copied().unwrap_or(0) + 1) as f64 / denom).ln())
                    .sum::<f64>();
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        best.map(|(i, _)| self.labels[i].as_str())
    }
}

impl Student for NaiveBayes {
    fn predict(&self, input: &str) -> Option<String> {
        self.predict_label(input).map(str::to_string)
    }
}

/// Train the reference student on the train partition of `dataset`.
pub fn train_reference_student(
    dataset: &Dataset,
    split: &SplitAssignment,
    task: StudentTask,
) -> Result<NaiveBayes, CodecError> {
    let pairs = dataset
        .iter()
        .filter(|e| split.partition_of(&e.id) == Partition::Train)
        .map(|e| encode_student(e, task))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NaiveBayes::fit(pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewCounts {
    pub overall: usize,
    pub few_shot: usize,
    pub per_slice: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Option<MetricSet>,
    /// `None` when no few-shot slice has test examples.
    pub few_shot: Option<MetricSet>,
    pub per_slice: BTreeMap<String, MetricSet>,
    pub counts: ViewCounts,
}

enum Gold {
    Label(String),
    Slots(SlotAnnotation),
}

fn predicted_slots(text: Option<&str>, task: StudentTask) -> Option<SlotAnnotation> {
    match decode_student_prediction(text?, task).ok()? {
        PredictedOutput::IntentAndSpans { intent, spans, .. } => Some(SlotAnnotation { intent, spans }),
        PredictedOutput::Label(_) => None,
    }
}

fn score_view(task: StudentTask, rows: &[(&Gold, Option<&str>)]) -> MetricSet {
    match task {
        StudentTask::SlotFilling => {
            let golds: Vec<SlotAnnotation> = rows
                .iter()
                .filter_map(|(g, _)| match g {
                    Gold::Slots(s) => Some(s.clone()),
                    Gold::Label(_) => None,
                })
                .collect();
            let preds: Vec<Option<SlotAnnotation>> = rows.iter().map(|(_, p)| predicted_slots(*p, task)).collect();
            score_slot_filling(&golds, &preds)
        }
        _ => {
            let golds: Vec<&str> = rows
                .iter()
                .map(|(g, _)| match g {
                    Gold::Label(l) => l.as_str(),
                    Gold::Slots(s) => s.intent.as_str(),
                })
                .collect();
            let preds: Vec<Option<&str>> = rows.iter().map(|(_, p)| p.map(str::trim)).collect();
            score_classification(&golds, &preds)
        }
    }
}

/// Score predictions on the test partition. `predict` receives each test
/// example with its student input and returns the raw student output.
pub fn evaluate_with(
    dataset: &Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    task: StudentTask,
    mut predict: impl FnMut(&Example, &str) -> Option<String>,
) -> Result<EvalReport, CodecError> {
    let membership = index.membership();
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    let mut slices_of = Vec::new();
    for example in dataset.iter().filter(|e| split.partition_of(&e.id) == Partition::Test) {
        let (input, _) = encode_student(example, task)?;
        let gold = match task {
            StudentTask::SlotFilling => Gold::Slots(SlotAnnotation {
                intent: task.gold_label(example)?.to_string(),
                spans: example.spans.clone(),
            }),
            _ => Gold::Label(task.gold_label(example)?.to_string()),
        };
        preds.push(predict(example, &input));
        golds.push(gold);
        slices_of.push(membership.get(example.id.as_str()).cloned().unwrap_or_default());
    }

    let rows: Vec<(&Gold, Option<&str>)> = golds.iter().zip(&preds).map(|(g, p)| (g, p.as_deref())).collect();
    let view = |keep: &dyn Fn(usize) -> bool| -> Vec<(&Gold, Option<&str>)> {
        (0..rows.len()).filter(|i| keep(*i)).map(|i| rows[i]).collect()
    };
    let overall_rows = view(&|_| true);
    let few_rows = view(&|i| slices_of[i].iter().any(|s| split.is_few_shot(s)));
    let score = |rows: &[(&Gold, Option<&str>)]| (!rows.is_empty()).then(|| score_view(task, rows));

    // Per-slice macro F1 averages the overall per-label F1 over the labels
    // present in the slice, so slices that partition the labels average
    // back to the overall macro F1.
    let label_of = |g: &Gold| match g {
        Gold::Label(l) => l.clone(),
        Gold::Slots(s) => s.intent.clone(),
    };
    let all_golds: Vec<String> = golds.iter().map(label_of).collect();
    let gold_refs: Vec<&str> = all_golds.iter().map(String::as_str).collect();
    let pred_labels: Vec<Option<String>> = preds
        .iter()
        .map(|p| match task {
            StudentTask::SlotFilling => predicted_slots(p.as_deref(), task).map(|s| s.intent),
            _ => p.as_deref().map(|p| p.trim().to_string()),
        })
        .collect();
    let pred_refs: Vec<Option<&str>> = pred_labels.iter().map(|p| p.as_deref()).collect();
    let label_f1 = per_label_f1(&gold_refs, &pred_refs);

    let mut per_slice = BTreeMap::new();
    let mut per_slice_counts = BTreeMap::new();
    for slice in index.slice_ids() {
        let idx: Vec<usize> = (0..rows.len()).filter(|i| slices_of[*i].contains(&slice)).collect();
        per_slice_counts.insert(slice.to_string(), idx.len());
        if idx.is_empty() {
            continue;
        }
        let slice_rows: Vec<_> = idx.iter().map(|&i| rows[i]).collect();
        let mut metrics = score_view(task, &slice_rows);
        let labels: BTreeSet<&str> = idx.iter().map(|&i| gold_refs[i]).collect();
        metrics.macro_f1 = mean(labels.iter().map(|l| label_f1[*l]));
        per_slice.insert(slice.to_string(), metrics);
    }

    Ok(EvalReport {
        overall: score(&overall_rows),
        few_shot: score(&few_rows),
        per_slice,
        counts: ViewCounts {
            overall: overall_rows.len(),
            few_shot: few_rows.len(),
            per_slice: per_slice_counts,
        },
    })
}

pub fn evaluate(
    student: &dyn Student,
    dataset: &Dataset,
    index: &SliceIndex,
    split: &SplitAssignment,
    task: StudentTask,
) -> Result<EvalReport, CodecError> {
    evaluate_with(dataset, index, split, task, |_, input| student.predict(input))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0))
}

impl EvalReport {
    /// Aligned plain-text table, percentages with one decimal.
    pub fn to_table(&self) -> String {
        let mut rows = vec![("overall".to_string(), self.counts.overall, self.overall.as_ref())];
        rows.push(("few-shot".to_string(), self.counts.few_shot, self.few_shot.as_ref()));
        for (slice, m) in &self.per_slice {
            rows.push((format!("  {slice}"), self.counts.per_slice[slice], Some(m)));
        }
        let width = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>8}  {:>6}  {:>6}", "view", "n", "acc", "macro_f1", "intent", "slot");
        for (name, n, m) in rows {
            let _ = writeln!(
                out,
                "{name:<width$}  {n:>6}  {:>6}  {:>8}  {:>6}  {:>6}",
                pct(m.map(|m| m.accuracy)),
                pct(m.map(|m| m.macro_f1)),
                pct(m.and_then(|m| m.intent_accuracy)),
                pct(m.and_then(|m| m.micro_slot_f1)),
            );
        }
        out
    }
}
