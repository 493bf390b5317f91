//! Instruction and preference datasets built by machine translation, and
//! rendering of chat records into token streams for SFT and DPO.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{humanize_count, word_count};
use crate::tokenizer::{Special, TokenId, Vocab};

/// Records translated per parallel batch. Output order always equals input order.
const TRANSLATE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("final assistant span of {len} tokens does not fit max_seq_len {max}")]
    AssistantOverflow { len: usize, max: usize },
    #[error("invalid dataset manifest: {0}")]
    Manifest(String),
    #[error("translation failed: {0}")]
    Mt(#[from] MtError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum MtError {
    #[error("transport error after {attempts} attempts: {msg}")]
    Transport { attempts: usize, msg: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub messages: Vec<Message>,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub source: String,
}

impl InstructionRecord {
    /// Single-turn record.
    pub fn single(user: &str, assistant: &str, category: &str) -> Self {
        InstructionRecord {
            messages: vec![Message::new(Role::User, user), Message::new(Role::Assistant, assistant)],
            category: category.to_string(),
            source: String::new(),
        }
    }

    /// An optional leading system message, then strictly alternating
    /// user/assistant turns ending on an assistant turn. No content may be
    /// blank.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidRecord(m.to_string()));
        let mut turns = self.messages.as_slice();
        if let Some(first) = turns.first() {
            if first.role == Role::System {
                turns = &turns[1..];
            }
        }
        if turns.is_empty() {
            return bad("no user/assistant turns");
        }
        if !turns.len().is_multiple_of(2) {
            return bad("turns must come in user/assistant pairs");
        }
        for (i, m) in turns.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != want {
                return bad(&format!("turn {i} should be {want:?}, found {:?}", m.role));
            }
        }
        if let Some(m) = self.messages.iter().find(|m| m.content.trim().is_empty()) {
            return bad(&format!("empty {:?} message", m.role));
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.messages.iter().map(|m| word_count(&m.content)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(rename = "lang")]
    pub language: String,
}

impl PreferenceTriplet {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prompt", &self.prompt),
            ("chosen", &self.chosen),
            ("rejected", &self.rejected),
        ] {
            if v.trim().is_empty() {
                return Err(DataError::InvalidRecord(format!("empty {name}")));
            }
        }
        if self.chosen == self.rejected {
            return Err(DataError::InvalidRecord("chosen and rejected are identical".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MtMetadata {
    pub name: String,
    pub bleu: Option<f64>,
    pub chrf: Option<f64>,
}

pub trait MtClient: Sync {
    fn translate(&self, text: &str, src: &str, tgt: &str) -> std::result::Result<String, MtError>;
    fn metadata(&self) -> MtMetadata;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMt;

impl MtClient for IdentityMt {
    fn translate(&self, text: &str, _src: &str, _tgt: &str) -> std::result::Result<String, MtError> {
        Ok(text.to_string())
    }

    fn metadata(&self) -> MtMetadata {
        MtMetadata {
            name: "identity".into(),
            ..Default::default()
        }
    }
}

/// Looks up the whole text first, then falls back to word-by-word
/// replacement; unknown words pass through.
#[derive(Debug, Clone, Default)]
pub struct DictionaryMt {
    pub entries: HashMap<String, String>,
}

impl DictionaryMt {
    pub fn new<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        DictionaryMt {
            entries: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    /// Reads a JSON object mapping source strings to translations.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let entries: HashMap<String, String> = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(DictionaryMt { entries })
    }
}

impl MtClient for DictionaryMt {
    fn translate(&self, text: &str, _src: &str, _tgt: &str) -> std::result::Result<String, MtError> {
        if let Some(t) = self.entries.get(text) {
            return Ok(t.clone());
        }
        let words: Vec<&str> = text
            .split(' ')
            .map(|w| self.entries.get(w).map(String::as_str).unwrap_or(w))
            .collect();
        Ok(words.join(" "))
    }

    fn metadata(&self) -> MtMetadata {
        MtMetadata {
            name: "dictionary".into(),
            ..Default::default()
        }
    }
}

/// Maps every input to the same output. Useful for collapse tests.
#[derive(Debug, Clone)]
pub struct ConstantMt(pub String);

impl MtClient for ConstantMt {
    fn translate(&self, _text: &str, _src: &str, _tgt: &str) -> std::result::Result<String, MtError> {
        Ok(self.0.clone())
    }

    fn metadata(&self) -> MtMetadata {
        MtMetadata {
            name: "constant".into(),
            ..Default::default()
        }
    }
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    text: &'a str,
    src: &'a str,
    tgt: &'a str,
}

#[derive(Deserialize)]
struct TranslateResponse {
    text: String,
}

/// Client for a remote service speaking `POST /translate {text, src, tgt} -> {text}`.
pub struct HttpMt {
    endpoint: String,
    client: reqwest::blocking::Client,
    max_attempts: usize,
    backoff: Duration,
    meta: MtMetadata,
}

impl fmt::Debug for HttpMt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpMt").field("endpoint", &self.endpoint).finish()
    }
}

impl HttpMt {
    pub fn new(base_url: &str) -> std::result::Result<Self, MtError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| MtError::Other(e.to_string()))?;
        Ok(HttpMt {
            endpoint: format!("{}/translate", base_url.trim_end_matches('/')),
            client,
            max_attempts: 3,
            backoff: Duration::from_millis(200),
            meta: MtMetadata {
                name: format!("http:{base_url}"),
                ..Default::default()
            },
        })
    }

    pub fn with_retries(mut self, max_attempts: usize, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn with_scores(mut self, bleu: Option<f64>, chrf: Option<f64>) -> Self {
        self.meta.bleu = bleu;
        self.meta.chrf = chrf;
        self
    }
}

impl MtClient for HttpMt {
    fn translate(&self, text: &str, src: &str, tgt: &str) -> std::result::Result<String, MtError> {
        let body = TranslateRequest { text, src, tgt };
        let mut last = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * attempt as u32);
            }
            let resp = match self.client.post(&self.endpoint).json(&body).send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() || status.as_u16() == 429 {
                last = format!("HTTP {status}");
                continue;
            }
            if !status.is_success() {
                return Err(MtError::Protocol(format!("HTTP {status}")));
            }
            let parsed: TranslateResponse = resp.json().map_err(|e| MtError::Protocol(e.to_string()))?;
            return Ok(parsed.text);
        }
        Err(MtError::Transport {
            attempts: self.max_attempts,
            msg: last,
        })
    }

    fn metadata(&self) -> MtMetadata {
        self.meta.clone()
    }
}

/// Per-build accounting. `consumed == emitted + dropped_*` always holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildCounters {
    pub consumed: usize,
    pub emitted: usize,
    pub dropped_invalid: usize,
    pub dropped_mt: usize,
    pub dropped_collapsed: usize,
}

impl BuildCounters {
    pub fn dropped(&self) -> usize {
        self.dropped_invalid + self.dropped_mt + self.dropped_collapsed
    }
}

#[derive(Debug, Clone)]
pub struct Built<T> {
    pub records: Vec<T>,
    pub counters: BuildCounters,
    /// One line per dropped record: input index and reason.
    pub errors: Vec<String>,
}

enum Outcome<T> {
    Keep(T),
    Invalid(String),
    Mt(String),
    Collapsed,
}

fn build<S, T, F>(src: impl IntoIterator<Item = S>, f: F) -> Built<T>
where
    S: Send,
    T: Send,
    F: Fn(S) -> Outcome<T> + Sync,
{
    let mut out = Built {
        records: Vec::new(),
        counters: BuildCounters::default(),
        errors: Vec::new(),
    };
    let mut iter = src.into_iter().peekable();
    while iter.peek().is_some() {
        let chunk: Vec<S> = iter.by_ref().take(TRANSLATE_CHUNK).collect();
        let base = out.counters.consumed;
        out.counters.consumed += chunk.len();
        let results: Vec<Outcome<T>> = chunk.into_par_iter().map(&f).collect();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Outcome::Keep(t) => {
                    out.counters.emitted += 1;
                    out.records.push(t);
                }
                Outcome::Invalid(msg) => {
                    out.counters.dropped_invalid += 1;
                    out.errors.push(format!("record {}: {msg}", base + i));
                }
                Outcome::Mt(msg) => {
                    out.counters.dropped_mt += 1;
                    out.errors.push(format!("record {}: {msg}", base + i));
                }
                Outcome::Collapsed => {
                    out.counters.dropped_collapsed += 1;
                    out.errors
                        .push(format!("record {}: chosen == rejected after translation", base + i));
                }
            }
        }
    }
    for e in &out.errors {
        log::warn!("{e}");
    }
    out
}

/// Translates every message field by field. Roles, order, category and
/// source are kept. Invalid records are never sent to the client; a failed
/// translation drops the record.
pub fn build_instruction_dataset<I>(
    src: I,
    mt: &dyn MtClient,
    src_lang: &str,
    tgt_lang: &str,
) -> Built<InstructionRecord>
where
    I: IntoIterator<Item = InstructionRecord>,
{
    build(src, |rec: InstructionRecord| {
        if let Err(e) = rec.validate() {
            return Outcome::Invalid(e.to_string());
        }
        let mut messages = Vec::with_capacity(rec.messages.len());
        for m in &rec.messages {
            match mt.translate(&m.content, src_lang, tgt_lang) {
                Ok(t) => messages.push(Message::new(m.role, t)),
                Err(e) => return Outcome::Mt(e.to_string()),
            }
        }
        let out = InstructionRecord { messages, ..rec };
        match out.validate() {
            Ok(()) => Outcome::Keep(out),
            Err(e) => Outcome::Mt(format!("translation produced an invalid record: {e}")),
        }
    })
}

/// Translates prompt, chosen and rejected. Triplets whose responses collapse
/// to the same text are dropped and counted.
pub fn build_preference_dataset<I>(
    src: I,
    mt: &dyn MtClient,
    src_lang: &str,
    tgt_lang: &str,
) -> Built<PreferenceTriplet>
where
    I: IntoIterator<Item = PreferenceTriplet>,
{
    build(src, |t: PreferenceTriplet| {
        if let Err(e) = t.validate() {
            return Outcome::Invalid(e.to_string());
        }
        let mut fields = Vec::with_capacity(3);
        for text in [&t.prompt, &t.chosen, &t.rejected] {
            match mt.translate(text, src_lang, tgt_lang) {
                Ok(s) => fields.push(s),
                Err(e) => return Outcome::Mt(e.to_string()),
            }
        }
        let rejected = fields.pop().expect("three fields");
        let chosen = fields.pop().expect("three fields");
        let prompt = fields.pop().expect("three fields");
        let out = PreferenceTriplet {
            prompt,
            chosen,
            rejected,
            language: tgt_lang.to_string(),
        };
        if out.chosen == out.rejected {
            return Outcome::Collapsed;
        }
        match out.validate() {
            Ok(()) => Outcome::Keep(out),
            Err(e) => Outcome::Mt(format!("translation produced an invalid triplet: {e}")),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: u64,
    /// Mean whitespace words per record over all messages, one decimal.
    pub avg_words: f64,
}

impl DatasetStats {
    fn from_totals(count: u64, total_words: u64) -> Self {
        let avg = if count == 0 {
            0.0
        } else {
            total_words as f64 / count as f64
        };
        DatasetStats {
            count,
            avg_words: (avg * 10.0).round() / 10.0,
        }
    }

    /// Count in the compact form used in summary tables, e.g. `9.5K`.
    pub fn count_label(&self) -> String {
        humanize_count(self.count)
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} instructions, {:.1} words on average",
            self.count_label(),
            self.avg_words
        )
    }
}

pub fn dataset_stats<'a>(records: impl IntoIterator<Item = &'a InstructionRecord>) -> DatasetStats {
    let (count, words) = records
        .into_iter()
        .fold((0u64, 0u64), |(c, w), r| (c + 1, w + r.word_count() as u64));
    DatasetStats::from_totals(count, words)
}

/// Precomputed totals for a dataset too large to ship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub count: u64,
    pub total_words: u64,
    #[serde(default)]
    pub source: String,
}

impl DatasetManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::from_totals(self.count, self.total_words)
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| DataError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instructions(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>> {
    read_jsonl(path.as_ref())
}

pub fn write_instructions(path: impl AsRef<Path>, records: &[InstructionRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

pub fn read_preferences(path: impl AsRef<Path>) -> Result<Vec<PreferenceTriplet>> {
    read_jsonl(path.as_ref())
}

pub fn write_preferences(path: impl AsRef<Path>, triplets: &[PreferenceTriplet]) -> Result<()> {
    write_jsonl(path.as_ref(), triplets)
}

/// Token ids with a per-token loss mask. `loss_mask[i]` marks whether
/// `ids[i]` is a training target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl Rendered {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// `[BOS] (ROLE_SYSTEM sys EOS)? (ROLE_USER user EOS ROLE_ASSISTANT asst EOS)+`.
///
/// The mask is true on assistant content and its closing EOS. Sequences
/// longer than `max_seq_len` lose tokens from the left; the final assistant
/// span is never cut.
pub fn render_chat(rec: &InstructionRecord, vocab: &Vocab, max_seq_len: usize) -> Result<Rendered> {
    rec.validate()?;
    let eos = vocab.special(Special::Eos);
    let mut ids = vec![vocab.special(Special::Bos)];
    let mut mask = vec![false];
    let mut last_span = 0;
    for m in &rec.messages {
        let role = match m.role {
            Role::System => Special::RoleSystem,
            Role::User => Special::RoleUser,
            Role::Assistant => Special::RoleAssistant,
        };
        ids.push(vocab.special(role));
        mask.push(false);
        let body = vocab.encode(&m.content);
        let target = m.role == Role::Assistant;
        last_span = body.len() + 1;
        mask.extend(std::iter::repeat_n(target, body.len() + 1));
        ids.extend(body);
        ids.push(eos);
    }
    if last_span > max_seq_len {
        return Err(DataError::AssistantOverflow {
            len: last_span,
            max: max_seq_len,
        });
    }
    if ids.len() > max_seq_len {
        let cut = ids.len() - max_seq_len;
        ids.drain(..cut);
        mask.drain(..cut);
    }
    Ok(Rendered { ids, loss_mask: mask })
}

/// Prompt prefix for generation and DPO: `[BOS] ROLE_USER prompt EOS ROLE_ASSISTANT`.
pub fn render_prompt(prompt: &str, vocab: &Vocab) -> Vec<TokenId> {
    let mut ids = vec![vocab.special(Special::Bos), vocab.special(Special::RoleUser)];
    ids.extend(vocab.encode(prompt));
    ids.push(vocab.special(Special::Eos));
    ids.push(vocab.special(Special::RoleAssistant));
    ids
}

/// Response tokens followed by EOS.
pub fn render_response(response: &str, vocab: &Vocab) -> Vec<TokenId> {
    let mut ids = vocab.encode(response);
    ids.push(vocab.special(Special::Eos));
    ids
}
