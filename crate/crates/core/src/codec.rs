//! Text encodings of examples.
//!
//! Exemplars are rendered as plain text with inline span markers
//! `[<label> <span text>]`, joined by `" | "`. The marker label is a numeric
//! role index ([`AnonymizationMode::Full`]) or the role name itself. Literal
//! `\`, `[`, `]` and `|` in text are backslash-escaped.
//!
//! Decoding generated text is total: any input yields either an [`Example`]
//! or a [`ParseRejection`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Example, ExampleError, Provenance, Span};

pub const SEPARATOR: &str = " | ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnonymizationMode {
    /// Spans carry role indices; no label or role string is emitted.
    #[default]
    Full,
    /// Spans carry role names.
    SlotNames,
    /// Role names, plus `"<intent>: "` before each example.
    SlotAndIntentNames,
}

impl AnonymizationMode {
    pub const ALL: [AnonymizationMode; 3] = [
        AnonymizationMode::Full,
        AnonymizationMode::SlotNames,
        AnonymizationMode::SlotAndIntentNames,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("span role {0:?} is not in the slice role map")]
    MissingRole(String),
    #[error("role {0:?} contains whitespace and cannot be written as a marker label")]
    UnencodableRole(String),
    #[error("no exemplars to encode")]
    NoExemplars,
    #[error("duplicate role {0:?} in role map")]
    DuplicateRole(String),
    #[error("example {id}: {source}")]
    InvalidExample {
        id: String,
        #[source]
        source: ExampleError,
    },
    #[error("example {id} lacks label {key:?}")]
    MissingLabel { id: String, key: String },
    #[error("example {id} lacks a {role:?} span")]
    MissingSpan { id: String, role: String },
}

/// The slice identity an encoding hides: labels implied by the slice, and the
/// bijection between role names and their anonymized indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SliceContext {
    pub label_assignments: BTreeMap<String, String>,
    /// `role_map[i]` is the role rendered as index `i`.
    pub role_map: Vec<String>,
}

impl SliceContext {
    pub fn new(
        label_assignments: BTreeMap<String, String>,
        role_map: Vec<String>,
    ) -> Result<Self, CodecError> {
        let mut seen = std::collections::BTreeSet::new();
        for role in &role_map {
            if !seen.insert(role) {
                return Err(CodecError::DuplicateRole(role.clone()));
            }
        }
        Ok(SliceContext {
            label_assignments,
            role_map,
        })
    }

    /// Context for a slice whose roles are those used by `examples`,
    /// indexed in lexicographic order.
    pub fn from_examples<'a>(
        label_assignments: BTreeMap<String, String>,
        examples: impl IntoIterator<Item = &'a Example>,
    ) -> Self {
        let roles: std::collections::BTreeSet<String> = examples
            .into_iter()
            .flat_map(|e| e.spans.iter().map(|s| s.role.clone()))
            .collect();
        SliceContext {
            label_assignments,
            role_map: roles.into_iter().collect(),
        }
    }

    pub fn index_of(&self, role: &str) -> Option<usize> {
        self.role_map.iter().position(|r| r == role)
    }

    /// The string prefixed to examples in [`AnonymizationMode::SlotAndIntentNames`].
    pub fn intent_name(&self) -> String {
        if let Some(intent) = self.label_assignments.get("intent") {
            return intent.clone();
        }
        self.label_assignments
            .values()
            .cloned()
            .collect::<Vec<_>>()
            .join("/")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExemplars {
    pub text: String,
    pub context: SliceContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnbalancedBracket,
    UnknownIndex,
    UnknownRole,
    EmptyText,
    EmptySpan,
    NestedMarker,
    BadEscape,
    /// Student slot-filling output without the `intent | text` separator.
    MissingSeparator,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::UnbalancedBracket => "unbalanced_bracket",
            RejectReason::UnknownIndex => "unknown_index",
            RejectReason::UnknownRole => "unknown_role",
            RejectReason::EmptyText => "empty_text",
            RejectReason::EmptySpan => "empty_span",
            RejectReason::NestedMarker => "nested_marker",
            RejectReason::BadEscape => "bad_escape",
            RejectReason::MissingSeparator => "missing_separator",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a piece of text could not be read back as an example. `position` is
/// the scalar-value offset in the (trimmed) input where parsing stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{reason} at offset {position}")]
pub struct ParseRejection {
    pub reason: RejectReason,
    pub position: usize,
}

impl ParseRejection {
    fn at(reason: RejectReason, position: usize) -> Self {
        ParseRejection { reason, position }
    }
}

fn is_special(c: char) -> bool {
    matches!(c, '\\' | '[' | ']' | '|')
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if is_special(c) {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// A span marker as it appears in text: an opaque label and its offsets in
/// the de-marked text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Text with markers removed and unescaped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Marked {
    pub text: String,
    pub spans: Vec<RawSpan>,
}

/// Parse marker syntax without interpreting labels.
pub fn parse_marked(input: &str) -> Result<Marked, ParseRejection> {
    use RejectReason::*;

    let mut out = Marked::default();
    let mut len = 0usize;
    let mut chars = input.chars().enumerate().peekable();
    // (label, start, label_done)
    let mut open: Option<(String, usize, bool)> = None;

    while let Some((pos, c)) = chars.next() {
        let literal = match c {
            '\\' => match chars.next() {
                Some((_, e)) if is_special(e) => e,
                _ => return Err(ParseRejection::at(BadEscape, pos)),
            },
            '[' => {
                if open.is_some() {
                    return Err(ParseRejection::at(NestedMarker, pos));
                }
                open = Some((String::new(), len, false));
                continue;
            }
            ']' => match open.take() {
                None => return Err(ParseRejection::at(UnbalancedBracket, pos)),
                Some((_, _, false)) => return Err(ParseRejection::at(EmptySpan, pos)),
                Some((label, start, true)) => {
                    if start == len {
                        return Err(ParseRejection::at(EmptySpan, pos));
                    }
                    out.spans.push(RawSpan { start, end: len, label });
                    continue;
                }
            },
            ' ' if matches!(open, Some((_, _, false))) => {
                if let Some((_, _, done)) = open.as_mut() {
                    *done = true;
                }
                continue;
            }
            c => c,
        };
        match open.as_mut() {
            Some((label, _, false)) => label.push(literal),
            _ => {
                out.text.push(literal);
                len += 1;
            }
        }
    }
    if open.is_some() {
        return Err(ParseRejection::at(UnbalancedBracket, input.chars().count()));
    }
    Ok(out)
}

/// Render `text` with `spans` as markers, labelling each span with `label`.
fn render_with<F>(text: &str, spans: &[Span], mut label: F) -> Result<String, CodecError>
where
    F: FnMut(&Span) -> Result<String, CodecError>,
{
    let mut out = String::with_capacity(text.len() + spans.len() * 6);
    let mut next = spans.iter().peekable();
    let mut current: Option<&Span> = None;
    for (i, c) in text.chars().enumerate() {
        if current.is_none() {
            if let Some(span) = next.peek().filter(|s| s.start == i) {
                out.push('[');
                out.push_str(&label(span)?);
                out.push(' ');
                current = next.next();
            }
        }
        if is_special(c) {
            out.push('\\');
        }
        out.push(c);
        if let Some(span) = current {
            if span.end == i + 1 {
                out.push(']');
                current = None;
            }
        }
    }
    Ok(out)
}

fn role_label(role: &str) -> Result<String, CodecError> {
    if role.chars().any(char::is_whitespace) {
        return Err(CodecError::UnencodableRole(role.to_string()));
    }
    Ok(escape(role))
}

fn encode_one(example: &Example, mode: AnonymizationMode, context: &SliceContext) -> Result<String, CodecError> {
    example.validate().map_err(|source| CodecError::InvalidExample {
        id: example.id.clone(),
        source,
    })?;
    let body = render_with(&example.text, &example.spans, |span| {
        let index = context
            .index_of(&span.role)
            .ok_or_else(|| CodecError::MissingRole(span.role.clone()))?;
        match mode {
            AnonymizationMode::Full => Ok(index.to_string()),
            _ => role_label(&span.role),
        }
    })?;
    Ok(match mode {
        AnonymizationMode::SlotAndIntentNames => {
            format!("{}: {}", escape(&context.intent_name()), body)
        }
        _ => body,
    })
}

/// Serialize the exemplars of one slice as a single teacher input.
pub fn encode_exemplars(
    exemplars: &[&Example],
    mode: AnonymizationMode,
    context: &SliceContext,
) -> Result<EncodedExemplars, CodecError> {
    if exemplars.is_empty() {
        return Err(CodecError::NoExemplars);
    }
    let parts = exemplars
        .iter()
        .map(|e| encode_one(e, mode, context))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedExemplars {
        text: parts.join(SEPARATOR),
        context: context.clone(),
    })
}

/// Serialize one example as a teacher target.
pub fn encode_target(
    example: &Example,
    mode: AnonymizationMode,
    context: &SliceContext,
) -> Result<String, CodecError> {
    encode_one(example, mode, context)
}

/// Split an encoded exemplar list back into per-exemplar strings.
pub fn split_exemplars(encoded: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut current = String::new();
    let mut chars = encoded.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                current.push(c);
                if let Some(next) = chars.next() {
                    current.push(next);
                }
            }
            '|' => parts.push(std::mem::take(&mut current)),
            _ => current.push(c),
        }
    }
    parts.push(current);
    let last = parts.len() - 1;
    parts
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let p = if i > 0 { p.strip_prefix(' ').unwrap_or(&p).to_string() } else { p };
            if i < last {
                // an escaped trailing space would be "\ ", which the codec never writes
                p.strip_suffix(' ').map(str::to_string).unwrap_or(p)
            } else {
                p
            }
        })
        .collect()
}

/// Reconstruct an example from generated text. Labels come from `context`;
/// the returned example has an empty id and synthetic provenance.
pub fn decode_generated(
    text: &str,
    mode: AnonymizationMode,
    context: &SliceContext,
) -> Result<Example, ParseRejection> {
    let mut body = text.trim();
    if body.is_empty() {
        return Err(ParseRejection::at(RejectReason::EmptyText, 0));
    }
    if mode == AnonymizationMode::SlotAndIntentNames {
        let prefix = format!("{}: ", escape(&context.intent_name()));
        if let Some(rest) = body.strip_prefix(&prefix) {
            body = rest;
        }
    }
    let marked = parse_marked(body)?;
    if marked.text.is_empty() {
        return Err(ParseRejection::at(RejectReason::EmptyText, 0));
    }
    let mut spans = Vec::with_capacity(marked.spans.len());
    for raw in marked.spans {
        let role = match mode {
            AnonymizationMode::Full => {
                let index = (!raw.label.is_empty() && raw.label.bytes().all(|b| b.is_ascii_digit()))
                    .then(|| raw.label.parse::<usize>().ok())
                    .flatten()
                    .filter(|&i| i < context.role_map.len())
                    .ok_or(ParseRejection::at(RejectReason::UnknownIndex, raw.start))?;
                context.role_map[index].clone()
            }
            _ => {
                if context.index_of(&raw.label).is_none() {
                    return Err(ParseRejection::at(RejectReason::UnknownRole, raw.start));
                }
                raw.label
            }
        };
        spans.push(Span::new(raw.start, raw.end, role));
    }
    Ok(Example {
        id: String::new(),
        text: marked.text,
        spans,
        labels: context.label_assignments.clone(),
        provenance: Provenance::Synthetic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentTask {
    Classification,
    SlotFilling,
    RelationExtraction,
}

impl StudentTask {
    pub fn label_key(self) -> &'static str {
        match self {
            StudentTask::Classification | StudentTask::SlotFilling => "intent",
            StudentTask::RelationExtraction => "relation",
        }
    }

    /// The label a student predicts for `example`: the task's label key, or
    /// the example's only label when that key is absent.
    pub fn gold_label(self, example: &Example) -> Result<&str, CodecError> {
        if let Some(v) = example.labels.get(self.label_key()) {
            return Ok(v);
        }
        match (self, example.labels.len()) {
            (StudentTask::SlotFilling, _) | (_, 2..) | (_, 0) => Err(CodecError::MissingLabel {
                id: example.id.clone(),
                key: self.label_key().to_string(),
            }),
            (_, _) => Ok(example.labels.values().next().expect("one label")),
        }
    }
}

/// Student (input, target) strings for `example`.
pub fn encode_student(example: &Example, task: StudentTask) -> Result<(String, String), CodecError> {
    let label = task.gold_label(example)?.to_string();
    match task {
        StudentTask::Classification => Ok((example.text.clone(), label)),
        StudentTask::RelationExtraction => {
            let find = |role: &str| {
                example
                    .spans
                    .iter()
                    .find(|s| s.role == role)
                    .cloned()
                    .ok_or_else(|| CodecError::MissingSpan {
                        id: example.id.clone(),
                        role: role.to_string(),
                    })
            };
            let mut entities = vec![find("head")?, find("tail")?];
            entities.sort();
            let input = render_with(&example.text, &entities, |s| {
                Ok(if s.role == "head" { "0" } else { "1" }.to_string())
            })?;
            Ok((input, label))
        }
        StudentTask::SlotFilling => {
            example.validate().map_err(|source| CodecError::InvalidExample {
                id: example.id.clone(),
                source,
            })?;
            let body = render_with(&example.text, &example.spans, |s| role_label(&s.role))?;
            Ok((example.text.clone(), format!("{label}{SEPARATOR}{body}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictedOutput {
    Label(String),
    IntentAndSpans {
        intent: String,
        text: String,
        spans: Vec<Span>,
    },
}

/// Inverse of the target side of [`encode_student`].
pub fn decode_student_prediction(text: &str, task: StudentTask) -> Result<PredictedOutput, ParseRejection> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ParseRejection::at(RejectReason::EmptyText, 0));
    }
    match task {
        StudentTask::Classification | StudentTask::RelationExtraction => {
            Ok(PredictedOutput::Label(text.to_string()))
        }
        StudentTask::SlotFilling => {
            let (intent, rest) = text
                .split_once('|')
                .ok_or(ParseRejection::at(RejectReason::MissingSeparator, 0))?;
            let intent = intent.trim();
            if intent.is_empty() {
                return Err(ParseRejection::at(RejectReason::EmptyText, 0));
            }
            let marked = parse_marked(rest.trim())?;
            if marked.spans.iter().any(|s| s.label.is_empty()) {
                return Err(ParseRejection::at(RejectReason::UnknownRole, 0));
            }
            Ok(PredictedOutput::IntentAndSpans {
                intent: intent.to_string(),
                text: marked.text,
                spans: marked
                    .spans
                    .into_iter()
                    .map(|s| Span::new(s.start, s.end, s.label))
                    .collect(),
            })
        }
    }
}
