//! Manual evaluation of instruction-following models.
//!
//! A fixed-quota sample of the instruction test set is drawn once, each
//! model's greedy output is attached to every sample, and human annotators
//! label the outputs as correct, partially correct or wrong through a small
//! HTTP/JSON service. Judgments are aggregated into per-model percentages.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod aggregate;
pub mod sampling;
pub mod server;
pub mod store;

pub use aggregate::{aggregate, aggregate_with, largest_remainder, per_annotator, Mode, Percentages};
pub use sampling::{
    default_exclude, generate_outputs, sample_from_record, stratified_sample, GenerationSummary, Quota, QuotaMap,
};
pub use server::{router, serve, serve_listener, AppState, Progress, ResultsView, SampleView, ServerConfig};
pub use store::{JudgmentStore, SampleStore};

#[derive(Debug, thiserror::Error)]
pub enum AnnError {
    #[error("category `{category}` has {available} items, quota is {quota}")]
    InsufficientItems {
        category: String,
        available: usize,
        quota: usize,
    },
    #[error("invalid sample `{id}`: {msg}")]
    InvalidSample { id: String, msg: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("no judgments for model `{0}`")]
    NoJudgments(String),
    #[error("no judgments by annotator `{annotator}` for model `{model}`")]
    NoAnnotatorJudgments { model: String, annotator: String },
    #[error("invalid label `{0}` (allowed: correct, partially_correct, wrong)")]
    InvalidLabel(String),
    #[error("{path}:{line}: {msg}")]
    Store { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnnError>;

/// One test-set instruction with the outputs of every evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub category: String,
    pub prompt: String,
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    /// Generation failures by model id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

impl EvalSample {
    pub fn new(id: impl Into<String>, category: impl Into<String>, prompt: impl Into<String>) -> Self {
        EvalSample {
            id: id.into(),
            category: category.into(),
            prompt: prompt.into(),
            reference: None,
            outputs: BTreeMap::new(),
            errors: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| AnnError::InvalidSample {
            id: self.id.clone(),
            msg: msg.into(),
        };
        if self.id.trim().is_empty() {
            return Err(bad("empty id"));
        }
        if self.prompt.trim().is_empty() {
            return Err(bad("empty prompt"));
        }
        if self.category.trim().is_empty() {
            return Err(bad("empty category"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Correct,
    PartiallyCorrect,
    Wrong,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Correct, Label::PartiallyCorrect, Label::Wrong];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Correct => "correct",
            Label::PartiallyCorrect => "partially_correct",
            Label::Wrong => "wrong",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = AnnError;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| AnnError::InvalidLabel(s.to_string()))
    }
}

/// One human label. Later judgments for the same (sample, model,
/// annotator) supersede earlier ones; the earlier rows stay in the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub sample_id: String,
    pub model_id: String,
    pub label: Label,
    pub annotator: String,
    /// UTC seconds.
    pub timestamp: u64,
}

pub(crate) fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Keeps the last judgment per (sample, model, annotator), in submission
/// order of that last write.
pub fn resolve_overwrites(judgments: &[Judgment]) -> Vec<&Judgment> {
    let mut last: BTreeMap<(&str, &str, &str), usize> = BTreeMap::new();
    for (i, j) in judgments.iter().enumerate() {
        last.insert((&j.sample_id, &j.model_id, &j.annotator), i);
    }
    let mut idx: Vec<usize> = last.into_values().collect();
    idx.sort_unstable();
    idx.into_iter().map(|i| &judgments[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn j(s: &str, a: &str, l: Label, t: u64) -> Judgment {
        Judgment {
            sample_id: s.into(),
            model_id: "m".into(),
            label: l,
            annotator: a.into(),
            timestamp: t,
        }
    }

    #[test]
    fn labels_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{l}\""));
        }
        assert!("excellent".parse::<Label>().is_err());
    }

    #[test]
    fn later_judgment_wins() {
        let js = vec![
            j("s1", "ane", Label::Wrong, 1),
            j("s2", "ane", Label::Correct, 2),
            j("s1", "ane", Label::Correct, 3),
            j("s1", "jon", Label::Wrong, 4),
        ];
        let r = resolve_overwrites(&js);
        assert_eq!(r.len(), 3);
        assert_eq!(r[1].label, Label::Correct);
        assert_eq!(r[1].timestamp, 3);
    }

    #[test]
    fn sample_validation() {
        assert!(EvalSample::new("a", "Chat", "kaixo").validate().is_ok());
        assert!(EvalSample::new("a", "Chat", "  ").validate().is_err());
        let s: EvalSample = serde_json::from_str(r#"{"id":"x","category":"Chat","prompt":"p"}"#).unwrap();
        assert!(s.outputs.is_empty() && s.reference.is_none());
    }
}
