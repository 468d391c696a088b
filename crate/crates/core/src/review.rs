//! Human curation of synthetic examples.
//!
//! Decisions are appended to a JSONL journal as they are made, so a review
//! can stop at any point and resume later. The curated dataset is always
//! derived by replaying the journal over the synthetic examples.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_generated, AnonymizationMode, ParseRejection, SliceContext};
use crate::dataset::{Example, ExampleError, Provenance, Span};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed journal entry: {reason}")]
    Journal {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
    /// Replacement text in role-name markup, e.g. `rain in [location Oslo]`.
    Edit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Accept,
    Reject,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub id: String,
    pub decision: DecisionKind,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<Span>>,
}

/// An edit that failed validation; the reviewer must be asked again.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidEdit {
    #[error("cannot parse edit: {0}")]
    Parse(ParseRejection),
    #[error("edited example is invalid: {0}")]
    Example(ExampleError),
}

pub struct ReviewSession {
    path: PathBuf,
    decided: BTreeMap<String, JournalEntry>,
}

impl ReviewSession {
    /// Open (or create) the journal at `path`, loading earlier decisions.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ReviewError> {
        let path = path.as_ref().to_path_buf();
        let mut decided = BTreeMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|source| ReviewError::Io {
                path: path.clone(),
                source,
            })?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| ReviewError::Io {
                    path: path.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: JournalEntry = serde_json::from_str(&line).map_err(|e| ReviewError::Journal {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                // later entries for the same id supersede earlier ones
                decided.insert(entry.id.clone(), entry);
            }
        }
        Ok(ReviewSession { path, decided })
    }

    pub fn is_decided(&self, id: &str) -> bool {
        self.decided.contains_key(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &JournalEntry> {
        self.decided.values()
    }

    /// Examples without a decision yet, in input order.
    pub fn pending<'a>(&self, synthetic: &'a [Example]) -> Vec<&'a Example> {
        synthetic.iter().filter(|e| !self.is_decided(&e.id)).collect()
    }

    /// Validate and journal one decision. An invalid edit is returned as
    /// `Ok(Err(..))` and nothing is recorded.
    pub fn record(
        &mut self,
        example: &Example,
        decision: &Decision,
        context: &SliceContext,
    ) -> Result<Result<(), InvalidEdit>, ReviewError> {
        let mut entry = JournalEntry {
            id: example.id.clone(),
            decision: DecisionKind::Accept,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            text: None,
            spans: None,
        };
        match decision {
            Decision::Accept => {}
            Decision::Reject => entry.decision = DecisionKind::Reject,
            Decision::Edit(markup) => {
                let mut edited = match decode_generated(markup, AnonymizationMode::SlotNames, context) {
                    Ok(e) => e,
                    Err(rejection) => return Ok(Err(InvalidEdit::Parse(rejection))),
                };
                edited.id = example.id.clone();
                if let Err(e) = edited.validate() {
                    return Ok(Err(InvalidEdit::Example(e)));
                }
                entry.decision = DecisionKind::Edit;
                entry.text = Some(edited.text);
                entry.spans = Some(edited.spans);
            }
        }
        self.append(&entry)?;
        self.decided.insert(entry.id.clone(), entry);
        Ok(Ok(()))
    }

    fn append(&self, entry: &JournalEntry) -> Result<(), ReviewError> {
        let io_err = |source| ReviewError::Io {
            path: self.path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        let line = serde_json::to_string(entry).expect("journal entries serialize");
        writeln!(file, "{line}").map_err(io_err)?;
        file.sync_data().map_err(io_err)
    }

    /// Accepted and edited examples, upgraded to curated provenance.
    pub fn curated(&self, synthetic: &[Example]) -> Vec<Example> {
        synthetic
            .iter()
            .filter_map(|e| {
                let entry = self.decided.get(&e.id)?;
                let mut out = e.clone();
                match entry.decision {
                    DecisionKind::Reject => return None,
                    DecisionKind::Accept => {}
                    DecisionKind::Edit => {
                        out.text = entry.text.clone().unwrap_or(out.text);
                        out.spans = entry.spans.clone().unwrap_or_default();
                    }
                }
                out.provenance = Provenance::SyntheticCurated;
                Some(out)
            })
            .collect()
    }
}

/// Apply a stream of decisions non-interactively. Invalid edits are
/// collected rather than accepted.
pub fn review_synthetic(
    synthetic: &[Example],
    decisions: impl IntoIterator<Item = (String, Decision)>,
    contexts: &dyn Fn(&Example) -> SliceContext,
    journal: impl AsRef<Path>,
) -> Result<(Vec<Example>, Vec<(String, InvalidEdit)>), ReviewError> {
    let mut session = ReviewSession::open(journal)?;
    let by_id: BTreeMap<&str, &Example> = synthetic.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut invalid = Vec::new();
    for (id, decision) in decisions {
        let Some(example) = by_id.get(id.as_str()) else {
            continue;
        };
        if let Err(e) = session.record(example, &decision, &contexts(example))? {
            invalid.push((id, e));
        }
    }
    Ok((session.curated(synthetic), invalid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> Vec<Example> {
        (0..3)
            .map(|i| {
                let mut e = Example::new(format!("syn-w-{i}"), format!("rain in city{i}"))
                    .with_label("intent", "weather")
                    .with_span(8, 13, "location");
                e.provenance = Provenance::Synthetic;
                e
            })
            .collect()
    }

    fn ctx(_: &Example) -> SliceContext {
        SliceContext::new(
            BTreeMap::from([("intent".into(), "weather".into())]),
            vec!["location".into()],
        )
        .unwrap()
    }

    #[test]
    fn accept_all_upgrades_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let syn = synthetic();
        let decisions = syn.iter().map(|e| (e.id.clone(), Decision::Accept));
        let (curated, invalid) = review_synthetic(&syn, decisions, &ctx, dir.path().join("j.jsonl")).unwrap();
        assert!(invalid.is_empty());
        assert_eq!(curated.len(), 3);
        for (c, s) in curated.iter().zip(&syn) {
            assert_eq!(c.provenance, Provenance::SyntheticCurated);
            assert_eq!((&c.id, &c.text, &c.spans, &c.labels), (&s.id, &s.text, &s.spans, &s.labels));
        }
    }

    #[test]
    fn reject_all_journals_every_id() {
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("j.jsonl");
        let syn = synthetic();
        let decisions = syn.iter().map(|e| (e.id.clone(), Decision::Reject));
        let (curated, _) = review_synthetic(&syn, decisions, &ctx, &journal).unwrap();
        assert!(curated.is_empty());
        let entries: Vec<JournalEntry> = std::fs::read_to_string(&journal)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["syn-w-0", "syn-w-1", "syn-w-2"]);
        assert!(entries.iter().all(|e| e.decision == DecisionKind::Reject));
    }

    #[test]
    fn invalid_edit_is_not_accepted_and_fix_is() {
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("j.jsonl");
        let syn = synthetic();
        let mut session = ReviewSession::open(&journal).unwrap();
        let broken = session
            .record(&syn[0], &Decision::Edit("snow in [location Bergen".into()), &ctx(&syn[0]))
            .unwrap();
        assert!(matches!(broken, Err(InvalidEdit::Parse(_))));
        assert!(!session.is_decided("syn-w-0"));
        session
            .record(&syn[0], &Decision::Edit("snow in [location Bergen]".into()), &ctx(&syn[0]))
            .unwrap()
            .unwrap();
        let curated = session.curated(&syn);
        assert_eq!(curated.len(), 1);
        assert_eq!(curated[0].text, "snow in Bergen");
        assert_eq!(curated[0].spans, vec![Span::new(8, 14, "location")]);
    }

    #[test]
    fn session_resumes_from_journal() {
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("j.jsonl");
        let syn = synthetic();
        {
            let mut session = ReviewSession::open(&journal).unwrap();
            session.record(&syn[0], &Decision::Accept, &ctx(&syn[0])).unwrap().unwrap();
        }
        let session = ReviewSession::open(&journal).unwrap();
        let pending: Vec<&str> = session.pending(&syn).iter().map(|e| e.id.as_str()).collect();
        assert_eq!(pending, ["syn-w-1", "syn-w-2"]);
        assert_eq!(session.curated(&syn).len(), 1);
    }
}
