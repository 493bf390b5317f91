//! Language-tagged documents: ingestion, statistics, manifests, and weighted
//! bilingual mixing.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Add;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("mix spec: {0}")]
    MixSpec(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("corpus `{0}` referenced by the mix spec is not available")]
    UnknownCorpus(String),
    #[error("corpus `{0}` yielded no documents")]
    EmptyCorpus(String),
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One unit of monolingual text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(rename = "lang")]
    pub language: String,
    pub source: String,
    #[serde(rename = "domain")]
    pub domain_tag: String,
    pub license: String,
    #[serde(skip)]
    pub word_count: usize,
}

impl Document {
    /// Validating constructor; `source`, `domain_tag`, and `license`
    /// default to "unknown".
    pub fn new(id: impl Into<String>, text: impl Into<String>, language: impl Into<String>) -> Result<Self> {
        let mut doc = Document {
            id: id.into(),
            text: text.into(),
            language: language.into(),
            source: "unknown".into(),
            domain_tag: "unknown".into(),
            license: "unknown".into(),
            word_count: 0,
        };
        doc.validate()?;
        doc.word_count = word_count(&doc.text);
        Ok(doc)
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain_tag = domain.into();
        self
    }

    pub fn with_license(mut self, license: impl Into<String>) -> Self {
        self.license = license.into();
        self
    }

    fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(CorpusError::InvalidDocument(format!("{}: empty text", self.id)));
        }
        if !is_language_code(&self.language) {
            return Err(CorpusError::InvalidDocument(format!(
                "{}: language `{}` is not a two-letter lowercase code",
                self.id, self.language
            )));
        }
        Ok(())
    }
}

pub fn is_language_code(s: &str) -> bool {
    s.len() == 2 && s.bytes().all(|b| b.is_ascii_lowercase())
}

/// Number of whitespace-separated runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Format {
    /// One JSON object per line with keys `id`, `text`, `lang` and optional
    /// `source`, `domain`, `license`.
    Jsonl,
    /// Every `*.txt` file in the directory (sorted by name) is one document
    /// of the given language; the file stem is the id.
    PlainDir { language: String },
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    text: Option<String>,
    lang: Option<String>,
    source: Option<String>,
    domain: Option<String>,
    license: Option<String>,
}

/// A per-record ingestion failure. The stream continues past it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub msg: String,
}

pub fn parse_jsonl_record(line: &str, lineno: usize) -> std::result::Result<Document, RecordError> {
    let err = |msg: String| RecordError { line: lineno, msg };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(format!("malformed json: {e}")))?;
    let id = match raw.id {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(_) => return Err(err("field `id` must be a string or number".into())),
        None => return Err(err("missing field `id`".into())),
    };
    let text = raw.text.ok_or_else(|| err("missing field `text`".into()))?;
    let lang = raw.lang.ok_or_else(|| err("missing field `lang`".into()))?;
    let mut doc = Document::new(id, text, lang).map_err(|e| err(e.to_string()))?;
    if let Some(s) = raw.source {
        doc.source = s;
    }
    if let Some(d) = raw.domain {
        doc.domain_tag = d;
    }
    if let Some(l) = raw.license {
        doc.license = l;
    }
    Ok(doc)
}

/// Lazy document stream over a file or directory.
pub struct Ingest {
    inner: IngestInner,
    errors: Vec<RecordError>,
}

enum IngestInner {
    Jsonl {
        lines: std::io::Lines<BufReader<File>>,
        lineno: usize,
    },
    PlainDir {
        files: std::vec::IntoIter<PathBuf>,
        language: String,
    },
}

impl Ingest {
    /// Number of malformed records seen so far.
    pub fn error_count(&self) -> usize {
        self.errors.len()
    }

    pub fn errors(&self) -> &[RecordError] {
        &self.errors
    }

    /// Drains the stream, keeping only valid documents.
    pub fn collect_valid(mut self) -> (Vec<Document>, Vec<RecordError>) {
        let docs: Vec<Document> = self.by_ref().collect();
        (docs, self.errors)
    }
}

impl Iterator for Ingest {
    type Item = Document;

    fn next(&mut self) -> Option<Document> {
        loop {
            match &mut self.inner {
                IngestInner::Jsonl { lines, lineno } => {
                    let line = lines.next()?;
                    *lineno += 1;
                    let line = match line {
                        Ok(l) => l,
                        Err(e) => {
                            self.errors.push(RecordError {
                                line: *lineno,
                                msg: format!("unreadable line: {e}"),
                            });
                            continue;
                        }
                    };
                    if line.trim().is_empty() {
                        continue;
                    }
                    match parse_jsonl_record(&line, *lineno) {
                        Ok(doc) => return Some(doc),
                        Err(e) => {
                            log::warn!("skipping record at line {}: {}", e.line, e.msg);
                            self.errors.push(e);
                        }
                    }
                }
                IngestInner::PlainDir { files, language } => {
                    let path = files.next()?;
                    let id = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let res = std::fs::read_to_string(&path)
                        .map_err(|e| e.to_string())
                        .and_then(|text| Document::new(id, text, language.clone()).map_err(|e| e.to_string()));
                    match res {
                        Ok(doc) => return Some(doc),
                        Err(msg) => self.errors.push(RecordError { line: 0, msg }),
                    }
                }
            }
        }
    }
}

/// Opens `path` as a lazy document stream. Unreadable paths fail here;
/// malformed records are counted on the returned stream.
pub fn ingest(path: impl AsRef<Path>, format: &Format) -> Result<Ingest> {
    let path = path.as_ref();
    let unreadable = |source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let inner = match format {
        Format::Jsonl => {
            let f = File::open(path).map_err(unreadable)?;
            IngestInner::Jsonl {
                lines: BufReader::new(f).lines(),
                lineno: 0,
            }
        }
        Format::PlainDir { language } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(unreadable)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            IngestInner::PlainDir {
                files: files.into_iter(),
                language: language.clone(),
            }
        }
    };
    Ok(Ingest {
        inner,
        errors: Vec::new(),
    })
}

pub fn write_jsonl<'a>(path: impl AsRef<Path>, docs: impl IntoIterator<Item = &'a Document>) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Document, word, and token totals for a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub words: u64,
    pub tokens: u64,
    /// False when no tokenizer was supplied; `tokens` is then 0.
    pub tokenized: bool,
}

impl Add for CorpusStats {
    type Output = CorpusStats;

    fn add(self, o: CorpusStats) -> CorpusStats {
        CorpusStats {
            documents: self.documents + o.documents,
            words: self.words + o.words,
            tokens: self.tokens + o.tokens,
            tokenized: self.tokenized || o.tokenized,
        }
    }
}

impl CorpusStats {
    fn empty(tokenized: bool) -> Self {
        CorpusStats {
            tokenized,
            ..Default::default()
        }
    }

    fn of(doc: &Document, vocab: Option<&Vocab>) -> Self {
        CorpusStats {
            documents: 1,
            words: doc.word_count as u64,
            tokens: vocab.map_or(0, |v| v.encode(&doc.text).len() as u64),
            tokenized: vocab.is_some(),
        }
    }
}

pub fn corpus_stats<'a>(docs: impl IntoIterator<Item = &'a Document>, vocab: Option<&Vocab>) -> CorpusStats {
    docs.into_iter()
        .map(|d| CorpusStats::of(d, vocab))
        .fold(CorpusStats::empty(vocab.is_some()), Add::add)
}

/// Sharded variant of [`corpus_stats`]; partial sums are merged associatively.
pub fn corpus_stats_par(docs: &[Document], vocab: Option<&Vocab>) -> CorpusStats {
    use rayon::prelude::*;
    docs.par_iter()
        .map(|d| CorpusStats::of(d, vocab))
        .reduce(|| CorpusStats::empty(vocab.is_some()), Add::add)
}

/// Formats a count with up to three significant digits and a K/M/B suffix.
pub fn humanize_count(n: u64) -> String {
    const UNITS: [(f64, &str); 3] = [(1e9, "B"), (1e6, "M"), (1e3, "K")];
    let x = n as f64;
    for (scale, suffix) in UNITS {
        if x >= scale {
            let v = x / scale;
            let decimals = if v >= 100.0 {
                0
            } else if v >= 10.0 {
                1
            } else {
                2
            };
            let s = format!("{v:.decimals$}");
            let s = if s.contains('.') {
                s.trim_end_matches('0').trim_end_matches('.').to_string()
            } else {
                s
            };
            return format!("{s}{suffix}");
        }
    }
    n.to_string()
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    #[serde(rename = "domain")]
    pub domain_tag: String,
    pub tokens_millions: f64,
    pub license: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTotals {
    pub documents: u64,
    pub words: u64,
    pub tokens: u64,
}

/// Per-source statistics of a corpus plus declared totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    /// Decimal places used for `tokens_millions`.
    #[serde(default = "default_precision")]
    pub precision: u32,
    pub totals: ManifestTotals,
    #[serde(rename = "entry", default)]
    pub entries: Vec<ManifestEntry>,
}

fn default_precision() -> u32 {
    2
}

impl CorpusManifest {
    pub fn from_toml(s: &str) -> Result<Self> {
        let m: CorpusManifest = toml::from_str(s).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&s)
    }

    /// Sum of per-entry token counts, in millions.
    pub fn entry_tokens_millions(&self) -> f64 {
        self.entries.iter().map(|e| e.tokens_millions).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.license.trim().is_empty()) {
            return Err(CorpusError::Manifest(format!("entry `{}` has no license", e.source)));
        }
        // Each entry may be off by half a unit in the last declared place.
        let slack = 0.5 * 10f64.powi(-(self.precision as i32)) * self.entries.len() as f64;
        let entries = self.entry_tokens_millions();
        let total = self.totals.tokens as f64 / 1e6;
        if entries - slack > total {
            return Err(CorpusError::Manifest(format!(
                "entries sum to {entries:.prec$}M tokens, above the declared total {total}M",
                prec = self.precision as usize
            )));
        }
        Ok(())
    }

    pub fn totals_as_stats(&self) -> CorpusStats {
        CorpusStats {
            documents: self.totals.documents,
            words: self.totals.words,
            tokens: self.totals.tokens,
            tokenized: true,
        }
    }
}

/// One weighted component of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    pub corpus_id: String,
    pub language: String,
    pub weight: f64,
    /// Optional jsonl location, used by file-backed mixing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub seed: u64,
    #[serde(rename = "component")]
    pub components: Vec<MixComponent>,
}

impl MixSpec {
    pub fn new(seed: u64, components: Vec<MixComponent>) -> Result<Self> {
        let spec = MixSpec { seed, components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: MixSpec = toml::from_str(s).map_err(|e| CorpusError::MixSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(CorpusError::MixSpec("no components".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.components {
            if !seen.insert(c.corpus_id.as_str()) {
                return Err(CorpusError::MixSpec(format!("duplicate corpus_id `{}`", c.corpus_id)));
            }
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(CorpusError::MixSpec(format!(
                    "weight {} of `{}` outside [0, 1]",
                    c.weight, c.corpus_id
                )));
            }
        }
        let sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::MixSpec(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

pub type DocIter<'a> = Box<dyn Iterator<Item = Document> + 'a>;

/// A document stream that can be reopened from the start.
pub trait DocSource {
    fn open(&self) -> Result<DocIter<'_>>;
}

impl DocSource for Vec<Document> {
    fn open(&self) -> Result<DocIter<'_>> {
        Ok(Box::new(self.iter().cloned()))
    }
}

/// A jsonl file re-read from the top on every restart.
pub struct JsonlSource(pub PathBuf);

impl DocSource for JsonlSource {
    fn open(&self) -> Result<DocIter<'_>> {
        Ok(Box::new(ingest(&self.0, &Format::Jsonl)?))
    }
}

/// Weighted, seeded, per-document mixture of several corpora. Exhausted
/// components restart from their beginning.
pub struct MixStream<'a> {
    cumulative: Vec<f64>,
    ids: Vec<String>,
    sources: Vec<&'a dyn DocSource>,
    streams: Vec<Option<DocIter<'a>>>,
    rng: ChaCha8Rng,
}

pub fn mix_stream<'a, S: DocSource>(spec: &MixSpec, corpora: &'a BTreeMap<String, S>) -> Result<MixStream<'a>> {
    spec.validate()?;
    let mut sources: Vec<&'a dyn DocSource> = Vec::new();
    let mut cumulative = Vec::new();
    let mut acc = 0.0;
    for c in &spec.components {
        let src = corpora
            .get(&c.corpus_id)
            .ok_or_else(|| CorpusError::UnknownCorpus(c.corpus_id.clone()))?;
        sources.push(src);
        acc += c.weight;
        cumulative.push(acc);
    }
    Ok(MixStream {
        cumulative,
        ids: spec.components.iter().map(|c| c.corpus_id.clone()).collect(),
        streams: (0..sources.len()).map(|_| None).collect(),
        sources,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    })
}

impl MixStream<'_> {
    fn pick(&mut self) -> usize {
        let u: f64 = self.rng.random();
        let total = *self.cumulative.last().expect("validated non-empty");
        let u = u * total;
        // Skip zero-weight components even at the boundary.
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// Next document, or an error if a component cannot be (re)opened or
    /// contains no documents at all.
    pub fn try_next(&mut self) -> Result<Document> {
        let i = self.pick();
        for attempt in 0..2 {
            if self.streams[i].is_none() || attempt == 1 {
                self.streams[i] = Some(self.sources[i].open()?);
            }
            if let Some(doc) = self.streams[i].as_mut().and_then(Iterator::next) {
                return Ok(doc);
            }
        }
        Err(CorpusError::EmptyCorpus(self.ids[i].clone()))
    }

    pub fn take_docs(&mut self, n: usize) -> Result<Vec<Document>> {
        (0..n).map(|_| self.try_next()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn doc(id: &str, text: &str, lang: &str) -> Document {
        Document::new(id, text, lang).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_three_line_jsonl() {
        let f = write_tmp(concat!(
            r#"{"id":"1","text":"kaixo mundua","lang":"eu"}"#,
            "\n",
            r#"{"id":"2","text":"egun on","lang":"eu","source":"berria","license":"cc-by-sa 4.0"}"#,
            "\n",
            r#"{"id":"3","text":"hello there world","lang":"en"}"#,
            "\n",
        ));
        let (docs, errors) = ingest(f.path(), &Format::Jsonl).unwrap().collect_valid();
        assert!(errors.is_empty());
        let langs: Vec<_> = docs.iter().map(|d| d.language.as_str()).collect();
        assert_eq!(langs, ["eu", "eu", "en"]);
        assert_eq!(docs[1].source, "berria");
        assert_eq!(docs[0].source, "unknown");
        assert_eq!(docs[2].word_count, 3);
    }

    #[test]
    fn ingest_empty_file() {
        let f = write_tmp("");
        let (docs, errors) = ingest(f.path(), &Format::Jsonl).unwrap().collect_valid();
        assert!(docs.is_empty() && errors.is_empty());
    }

    #[test]
    fn record_missing_text_is_counted_and_skipped() {
        let f = write_tmp(concat!(
            r#"{"id":"1","lang":"eu"}"#,
            "\n",
            r#"{"id":"2","text":"bai","lang":"eu"}"#,
            "\n",
            "not json\n",
            r#"{"id":"4","text":"x","lang":"EU"}"#,
            "\n",
        ));
        let (docs, errors) = ingest(f.path(), &Format::Jsonl).unwrap().collect_valid();
        assert_eq!(docs.len(), 1);
        assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), [1, 3, 4]);
        assert!(errors[0].msg.contains("text"));
    }

    #[test]
    fn unreadable_path_is_fatal() {
        assert!(matches!(
            ingest("/nonexistent/corpus.jsonl", &Format::Jsonl),
            Err(CorpusError::Unreadable { .. })
        ));
    }

    #[test]
    fn plain_dir_ingest_sorted() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "bigarren testua").unwrap();
        std::fs::write(dir.path().join("a.txt"), "lehen testua hemen").unwrap();
        std::fs::write(dir.path().join("skip.md"), "ignored").unwrap();
        let docs: Vec<_> = ingest(dir.path(), &Format::PlainDir { language: "eu".into() })
            .unwrap()
            .collect();
        assert_eq!(docs.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(docs[0].word_count, 3);
    }

    #[test]
    fn word_count_is_whitespace_runs() {
        assert_eq!(word_count("  a\tb \n\n c  "), 3);
        assert_eq!(word_count("ez"), 1);
    }

    #[test]
    fn document_invariants() {
        assert!(Document::new("x", "   ", "eu").is_err());
        assert!(Document::new("x", "ok", "eus").is_err());
        assert!(Document::new("x", "ok", "En").is_err());
    }

    #[test]
    fn stats_empty_and_small() {
        let v = Vocab::bytes_only();
        assert_eq!(
            corpus_stats([], Some(&v)),
            CorpusStats {
                documents: 0,
                words: 0,
                tokens: 0,
                tokenized: true
            }
        );
        let docs = [doc("1", "a b", "eu"), doc("2", "c", "eu")];
        let s = corpus_stats(&docs, Some(&v));
        let expected_tokens = (v.encode("a b").len() + v.encode("c").len()) as u64;
        assert_eq!((s.documents, s.words, s.tokens), (2, 3, expected_tokens));
        assert_eq!(expected_tokens, 4);
        let untok = corpus_stats(&docs, None);
        assert!(!untok.tokenized);
        assert_eq!(untok.tokens, 0);
    }

    #[test]
    fn stats_additive_and_parallel_agree() {
        let v = Vocab::bytes_only();
        let docs: Vec<_> = (0..50)
            .map(|i| doc(&i.to_string(), &"hitz ".repeat(i % 7 + 1), "eu"))
            .collect();
        let whole = corpus_stats(&docs, Some(&v));
        let split = corpus_stats(&docs[..20], Some(&v)) + corpus_stats(&docs[20..], Some(&v));
        assert_eq!(whole, split);
        assert_eq!(whole, corpus_stats_par(&docs, Some(&v)));
    }

    #[test]
    fn humanize_matches_table_formatting() {
        assert_eq!(humanize_count(1_610_000), "1.61M");
        assert_eq!(humanize_count(512_000_000), "512M");
        assert_eq!(humanize_count(1_550_000_000), "1.55B");
        assert_eq!(humanize_count(9_500), "9.5K");
        assert_eq!(humanize_count(517_982), "518K");
        assert_eq!(humanize_count(42), "42");
    }

    #[test]
    fn manifest_requires_licenses() {
        let bad = r#"
name = "x"
[totals]
documents = 1
words = 1
tokens = 1000000
[[entry]]
source = "s"
domain = "news"
tokens_millions = 0.5
license = ""
"#;
        assert!(CorpusManifest::from_toml(bad).is_err());
    }

    fn two_corpora() -> BTreeMap<String, Vec<Document>> {
        let eu: Vec<_> = (0..7).map(|i| doc(&format!("eu{i}"), "kaixo", "eu")).collect();
        let en: Vec<_> = (0..3).map(|i| doc(&format!("en{i}"), "hello", "en")).collect();
        BTreeMap::from([("zh".to_string(), eu), ("fw".to_string(), en)])
    }

    fn spec(weights: &[(&str, &str, f64)], seed: u64) -> MixSpec {
        MixSpec::new(
            seed,
            weights
                .iter()
                .map(|&(id, lang, w)| MixComponent {
                    corpus_id: id.into(),
                    language: lang.into(),
                    weight: w,
                    path: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_weight_draws_only_one_corpus() {
        let corpora = two_corpora();
        let s = spec(&[("zh", "eu", 1.0), ("fw", "en", 0.0)], 3);
        let docs = mix_stream(&s, &corpora).unwrap().take_docs(100).unwrap();
        assert!(docs.iter().all(|d| d.language == "eu"));
    }

    #[test]
    fn exhausted_component_restarts() {
        let corpora = two_corpora();
        let s = spec(&[("zh", "eu", 1.0)], 3);
        let ids: Vec<_> = mix_stream(&s, &corpora)
            .unwrap()
            .take_docs(15)
            .unwrap()
            .into_iter()
            .map(|d| d.id)
            .collect();
        assert_eq!(ids[0], "eu0");
        assert_eq!(ids[7], "eu0");
        assert_eq!(ids[14], "eu0");
    }

    #[test]
    fn mix_is_deterministic_per_seed() {
        let corpora = two_corpora();
        let s = spec(&[("zh", "eu", 0.8), ("fw", "en", 0.2)], 11);
        let a: Vec<_> = mix_stream(&s, &corpora).unwrap().take_docs(500).unwrap();
        let b: Vec<_> = mix_stream(&s, &corpora).unwrap().take_docs(500).unwrap();
        assert_eq!(a, b);
        let other = spec(&[("zh", "eu", 0.8), ("fw", "en", 0.2)], 12);
        let c: Vec<_> = mix_stream(&other, &corpora).unwrap().take_docs(500).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mix_fraction_within_binomial_bound() {
        let corpora = two_corpora();
        let s = spec(&[("zh", "eu", 0.8), ("fw", "en", 0.2)], 2024);
        let docs = mix_stream(&s, &corpora).unwrap().take_docs(10_000).unwrap();
        let eu = docs.iter().filter(|d| d.language == "eu").count();
        assert!((7880..=8120).contains(&eu), "eu count {eu}");
    }

    #[test]
    fn unresolvable_corpus_is_fatal() {
        let corpora = two_corpora();
        let s = spec(&[("missing", "eu", 1.0)], 0);
        assert!(matches!(mix_stream(&s, &corpora), Err(CorpusError::UnknownCorpus(_))));
    }

    #[test]
    fn mix_spec_validation() {
        let c = |id: &str, w: f64| MixComponent {
            corpus_id: id.into(),
            language: "eu".into(),
            weight: w,
            path: None,
        };
        assert!(MixSpec::new(0, vec![c("a", 0.5), c("b", 0.4)]).is_err());
        assert!(MixSpec::new(0, vec![c("a", 0.5), c("a", 0.5)]).is_err());
        assert!(MixSpec::new(0, vec![]).is_err());
        let toml = r#"
seed = 7
[[component]]
corpus_id = "zelaihandi"
language = "eu"
weight = 0.8
[[component]]
corpus_id = "fineweb"
language = "en"
weight = 0.2
"#;
        let spec = MixSpec::from_toml(toml).unwrap();
        assert_eq!(spec.components.len(), 2);
    }

    #[test]
    fn empty_component_is_an_error_not_a_hang() {
        let corpora: BTreeMap<String, Vec<Document>> = BTreeMap::from([("e".into(), vec![])]);
        let s = spec(&[("e", "eu", 1.0)], 0);
        assert!(matches!(
            mix_stream(&s, &corpora).unwrap().try_next(),
            Err(CorpusError::EmptyCorpus(_))
        ));
    }
}
