//! Few-shot evaluation by log-likelihood ranking.
//!
//! Prompt template: each exemplar is its query immediately followed by its
//! gold choice; exemplars are joined by blank lines and followed by the
//! scored item's query. A choice is scored as the continuation of the
//! prompt, so queries carry their own trailing separator (for example
//! `"...\nErantzuna:"` with choices `" A"`, `" B"`).

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{loglikelihood, ModelConfig, ModelError, Params};
use crate::tokenizer::Vocab;

/// Shot count for benchmarks without an entry in the registry.
pub const DEFAULT_SHOTS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {task}: {msg}")]
    InvalidTask { task: String, msg: String },
    #[error("task {task}: shot pool has {have} items, {need} needed")]
    ShotPool { task: String, have: usize, need: usize },
    #[error("item needs {len} tokens, model context is {max}")]
    Unscorable { len: usize, max: usize },
    #[error("no tasks to evaluate")]
    NoTasks,
    #[error("report has no language label")]
    MissingLanguage,
    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Few-shot counts per benchmark family. Names match by prefix, so
/// `HellaSwag_HT_eu_sample` resolves to `HellaSwag`.
pub fn default_registry() -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("ARC", 25),
        ("Winogrande", 5),
        ("MMLU", 5),
        ("HellaSwag", 10),
        ("BL2MP", 0),
        ("Belebele", 5),
        ("X-StoryCloze", 0),
        ("EusExams", 5),
        ("EusProficiency", 5),
        ("EusReading", 1),
        ("EusTrivia", 5),
        ("BasqueGLUE", 5),
    ])
}

/// Registry lookup by case-insensitive prefix, falling back to [`DEFAULT_SHOTS`].
pub fn shots_for(task_name: &str) -> usize {
    let lower = task_name.to_lowercase();
    default_registry()
        .into_iter()
        .filter(|(k, _)| lower.starts_with(&k.to_lowercase()))
        .max_by_key(|(k, _)| k.len())
        .map_or(DEFAULT_SHOTS, |(_, n)| n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    MinimalPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    SumLl,
    BytenormLl,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalItem {
    Choice {
        query: String,
        choices: Vec<String>,
        gold: usize,
    },
    Pair {
        good: String,
        bad: String,
    },
}

impl EvalItem {
    /// Stable per-item seed material.
    fn key(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("item serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Query followed by its gold choice.
    fn solved(&self) -> String {
        match self {
            EvalItem::Choice { query, choices, gold } => format!("{query}{}", choices[*gold]),
            EvalItem::Pair { good, .. } => good.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub kind: TaskKind,
    pub n_shot: usize,
    pub scoring: Scoring,
    pub items: Vec<EvalItem>,
    pub shot_pool: Vec<EvalItem>,
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(EvalError::InvalidTask {
                task: self.name.clone(),
                msg,
            })
        };
        for (i, it) in self.items.iter().chain(&self.shot_pool).enumerate() {
            match (self.kind, it) {
                (TaskKind::MultipleChoice, EvalItem::Choice { choices, gold, .. }) => {
                    if choices.len() < 2 {
                        return bad(format!("item {i} has fewer than 2 choices"));
                    }
                    if *gold >= choices.len() {
                        return bad(format!("item {i} gold {gold} out of range"));
                    }
                    if choices.iter().any(|c| c.is_empty()) {
                        return bad(format!("item {i} has an empty choice"));
                    }
                }
                (TaskKind::MinimalPair, EvalItem::Pair { good, bad: b }) => {
                    if good.is_empty() || b.is_empty() {
                        return bad(format!("item {i} has an empty sentence"));
                    }
                }
                _ => return bad(format!("item {i} does not match task kind {:?}", self.kind)),
            }
        }
        if self.kind == TaskKind::MinimalPair && self.n_shot != 0 {
            return bad("minimal-pair tasks are zero-shot".into());
        }
        let pool: HashSet<&EvalItem> = self.shot_pool.iter().collect();
        if self.items.iter().any(|it| pool.contains(it)) {
            return bad("shot pool overlaps the scored items".into());
        }
        if self.shot_pool.len() < self.n_shot {
            return Err(EvalError::ShotPool {
                task: self.name.clone(),
                have: self.shot_pool.len(),
                need: self.n_shot,
            });
        }
        Ok(())
    }
}

/// Indices into the shot pool used as exemplars for `item`.
pub fn exemplar_indices(task: &EvalTask, item: &EvalItem, seed: u64) -> Result<Vec<usize>> {
    if task.n_shot == 0 {
        return Ok(Vec::new());
    }
    let candidates: Vec<usize> = (0..task.shot_pool.len())
        .filter(|&i| &task.shot_pool[i] != item)
        .collect();
    if candidates.len() < task.n_shot {
        return Err(EvalError::ShotPool {
            task: task.name.clone(),
            have: candidates.len(),
            need: task.n_shot,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ item.key());
    let mut picked = candidates;
    picked.shuffle(&mut rng);
    picked.truncate(task.n_shot);
    Ok(picked)
}

/// The few-shot prompt for `item`, deterministic in `(task, item, seed)`.
pub fn build_prompt(task: &EvalTask, item: &EvalItem, seed: u64) -> Result<String> {
    let query = match item {
        EvalItem::Choice { query, .. } => query.as_str(),
        EvalItem::Pair { .. } => "",
    };
    let mut parts: Vec<String> = exemplar_indices(task, item, seed)?
        .into_iter()
        .map(|i| task.shot_pool[i].solved())
        .collect();
    parts.push(query.to_string());
    Ok(parts.join("\n\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Score {
    /// Predicted choice index.
    Choice(usize),
    /// Whether the grammatical sentence scored strictly higher.
    Pair(bool),
}

impl Score {
    pub fn is_correct(&self, item: &EvalItem) -> bool {
        match (self, item) {
            (Score::Choice(p), EvalItem::Choice { gold, .. }) => p == gold,
            (Score::Pair(ok), EvalItem::Pair { .. }) => *ok,
            _ => false,
        }
    }
}

fn fits(cfg: &ModelConfig, vocab: &Vocab, prompt: &str, cont: &str) -> Result<()> {
    let len = 1 + vocab.encode(prompt).len() + vocab.encode(cont).len();
    if len > cfg.max_seq_len {
        return Err(EvalError::Unscorable {
            len,
            max: cfg.max_seq_len,
        });
    }
    Ok(())
}

/// Multiple choice: argmax of the choice log-likelihood given the prompt
/// (raw sum, or divided by the choice's byte length), ties to the lowest
/// index. Minimal pair: correct iff the grammatical sentence is strictly
/// more likely, both scored standalone.
pub fn score_item(
    params: &Params,
    cfg: &ModelConfig,
    vocab: &Vocab,
    task: &EvalTask,
    item: &EvalItem,
    seed: u64,
) -> Result<Score> {
    match item {
        EvalItem::Choice { choices, .. } => {
            let prompt = build_prompt(task, item, seed)?;
            let longest = choices.iter().max_by_key(|c| vocab.encode(c).len()).expect("validated");
            fits(cfg, vocab, &prompt, longest)?;
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, c) in choices.iter().enumerate() {
                let (ll, _) = loglikelihood(params, cfg, vocab, &prompt, c)?;
                let s = match task.scoring {
                    Scoring::SumLl => ll,
                    Scoring::BytenormLl => ll / c.len() as f64,
                };
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            Ok(Score::Choice(best))
        }
        EvalItem::Pair { good, bad } => {
            fits(cfg, vocab, "", good)?;
            fits(cfg, vocab, "", bad)?;
            let (g, _) = loglikelihood(params, cfg, vocab, "", good)?;
            let (b, _) = loglikelihood(params, cfg, vocab, "", bad)?;
            Ok(Score::Pair(g > b))
        }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    pub n_shot: usize,
    /// Percent correct over scored items, 2 decimals.
    pub accuracy: f64,
    pub n_items: usize,
    pub unscorable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub language: String,
    pub tasks: Vec<TaskResult>,
    /// Unweighted mean of the task accuracies, 2 decimals.
    pub average: f64,
    #[serde(default)]
    pub excluded: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl SuiteReport {
    /// Builds a report from per-task results, computing the average.
    pub fn from_tasks(language: &str, tasks: Vec<TaskResult>) -> Self {
        let average = if tasks.is_empty() {
            0.0
        } else {
            round2(tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64)
        };
        SuiteReport {
            language: language.to_string(),
            tasks,
            average,
            excluded: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Plain-text table: one row per task, then the average.
    pub fn to_table(&self) -> String {
        let width = self.tasks.iter().map(|t| t.name.len()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>5}  {:>8}",
            "Task", "shots", "n", self.language
        );
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6}  {:>5}  {:>8.2}",
                t.name, t.n_shot, t.n_items, t.accuracy
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>5}  {:>8.2}", "Average", "", "", self.average);
        for n in self.excluded.iter().chain(&self.notes) {
            let _ = writeln!(s, "# {n}");
        }
        s
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Scores every item of every task. Items run in parallel; results are
/// assembled in item order. Tasks without any scorable item are left out of
/// the average and listed in `excluded`.
pub fn run_suite(
    params: &Params,
    cfg: &ModelConfig,
    vocab: &Vocab,
    tasks: &[EvalTask],
    seed: u64,
    language: &str,
) -> Result<SuiteReport> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let mut results = Vec::new();
    let mut excluded = Vec::new();
    for task in tasks {
        task.validate()?;
        let scores: Vec<Result<Score>> = task
            .items
            .par_iter()
            .map(|it| score_item(params, cfg, vocab, task, it, seed))
            .collect();
        let mut correct = 0;
        let mut scored = 0;
        let mut unscorable = 0;
        for (it, s) in task.items.iter().zip(scores) {
            match s {
                Ok(s) => {
                    scored += 1;
                    correct += s.is_correct(it) as usize;
                }
                Err(EvalError::Unscorable { .. }) => unscorable += 1,
                Err(e) => return Err(e),
            }
        }
        if scored == 0 {
            log::warn!("task {} has no scorable items; excluded", task.name);
            excluded.push(format!("{}: no scorable items ({unscorable} over context)", task.name));
            continue;
        }
        results.push(TaskResult {
            name: task.name.clone(),
            n_shot: task.n_shot,
            accuracy: round2(100.0 * correct as f64 / scored as f64),
            n_items: scored,
            unscorable,
        });
    }
    let mut report = SuiteReport::from_tasks(language, results);
    report.excluded = excluded;
    Ok(report)
}

/// `b.average − a.average` (target minus reference), 2 decimals.
pub fn gap_report(a: &SuiteReport, b: &SuiteReport) -> Result<f64> {
    if a.language.is_empty() || b.language.is_empty() {
        return Err(EvalError::MissingLanguage);
    }
    Ok(round2(b.average - a.average))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub computed: f64,
    pub reported: f64,
    pub matches: bool,
    pub note: Option<String>,
}

/// Recomputes a published difference from the two averages printed next
/// to it and flags any disagreement.
pub fn check_reported_gap(avg_a: f64, avg_b: f64, reported: f64) -> GapCheck {
    let computed = round2(avg_b - avg_a);
    let matches = (computed - reported).abs() < 0.005;
    let note = (!matches)
        .then(|| format!("reported difference {reported:.2} does not equal {avg_b:.2} - {avg_a:.2} = {computed:.2}"));
    GapCheck {
        computed,
        reported,
        matches,
        note,
    }
}

/// TOML task descriptor. `items` and `shots` are jsonl paths relative to
/// the descriptor.
#[derive(Debug, Clone, Deserialize)]
struct TaskDescriptor {
    name: String,
    kind: TaskKind,
    n_shot: Option<usize>,
    #[serde(default)]
    scoring: Scoring,
    items: PathBuf,
    shots: Option<PathBuf>,
}

fn read_items(path: &Path) -> Result<Vec<EvalItem>> {
    let f = BufReader::new(std::fs::File::open(path).map_err(|e| EvalError::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Load {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Loads one task from its TOML descriptor. Without an explicit `n_shot`
/// the registry decides (minimal pairs are always zero-shot).
pub fn load_task(descriptor: impl AsRef<Path>) -> Result<EvalTask> {
    let path = descriptor.as_ref();
    let text = std::fs::read_to_string(path)?;
    let d: TaskDescriptor = toml::from_str(&text).map_err(|e| EvalError::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let items = read_items(&base.join(&d.items))?;
    let shot_pool = match &d.shots {
        Some(p) => read_items(&base.join(p))?,
        None => Vec::new(),
    };
    let n_shot = match d.kind {
        TaskKind::MinimalPair => d.n_shot.unwrap_or(0),
        TaskKind::MultipleChoice => d.n_shot.unwrap_or_else(|| shots_for(&d.name)),
    };
    let task = EvalTask {
        name: d.name,
        kind: d.kind,
        n_shot,
        scoring: d.scoring,
        items,
        shot_pool,
    };
    task.validate()?;
    Ok(task)
}

/// Loads every `*.toml` descriptor in `dir`, sorted by file name.
pub fn load_task_dir(dir: impl AsRef<Path>) -> Result<Vec<EvalTask>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(load_task).collect()
}
