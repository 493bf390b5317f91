//! jsonl persistence. Samples are written offline and read-only while
//! serving; judgments are append-only.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{AnnError, EvalSample, Judgment, Result};

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AnnError::Store {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Sampled instructions with model outputs, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct SampleStore {
    samples: Vec<EvalSample>,
    index: HashMap<String, usize>,
}

impl SampleStore {
    pub fn new(samples: Vec<EvalSample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            if index.insert(s.id.clone(), i).is_some() {
                return Err(AnnError::DuplicateSample(s.id.clone()));
            }
        }
        Ok(SampleStore { samples, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_jsonl(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.samples)
    }

    pub fn get(&self, id: &str) -> Option<&EvalSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn samples(&self) -> &[EvalSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<EvalSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every model id with at least one output.
    pub fn models(&self) -> BTreeSet<String> {
        self.samples.iter().flat_map(|s| s.outputs.keys().cloned()).collect()
    }
}

/// Append-only judgment log. Writes go through one lock; readers take an
/// immutable snapshot without locking.
pub struct JudgmentStore {
    writer: Mutex<Box<dyn Write + Send>>,
    snapshot: ArcSwap<Vec<Judgment>>,
}

impl std::fmt::Debug for JudgmentStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JudgmentStore")
            .field("judgments", &self.snapshot.load().len())
            .finish()
    }
}

impl JudgmentStore {
    pub fn new(writer: Box<dyn Write + Send>, existing: Vec<Judgment>) -> Self {
        JudgmentStore {
            writer: Mutex::new(writer),
            snapshot: ArcSwap::from_pointee(existing),
        }
    }

    /// Replays the log at `path` (created if missing) and opens it for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let existing = if path.exists() { read_jsonl(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(Box::new(file), existing))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<Judgment>> {
        read_jsonl(path.as_ref())
    }

    /// Writes one line and then publishes it to readers.
    pub fn append(&self, j: Judgment) -> Result<()> {
        let mut line = serde_json::to_vec(&j).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        w.write_all(&line)?;
        w.flush()?;
        let mut next = Vec::clone(&self.snapshot.load());
        next.push(j);
        self.snapshot.store(Arc::new(next));
        Ok(())
    }

    pub fn snapshot(&self) -> Arc<Vec<Judgment>> {
        self.snapshot.load_full()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Label;

    fn judgment(s: &str, label: Label) -> Judgment {
        Judgment {
            sample_id: s.into(),
            model_id: "m".into(),
            label,
            annotator: "ane".into(),
            timestamp: 5,
        }
    }

    #[test]
    fn log_is_replayed_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        {
            let st = JudgmentStore::open(&path).unwrap();
            st.append(judgment("a", Label::Wrong)).unwrap();
            st.append(judgment("a", Label::Correct)).unwrap();
        }
        let st = JudgmentStore::open(&path).unwrap();
        assert_eq!(st.snapshot().len(), 2);
        st.append(judgment("b", Label::Wrong)).unwrap();
        assert_eq!(JudgmentStore::load(&path).unwrap().len(), 3);
    }

    #[test]
    fn corrupt_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        std::fs::write(&path, "{\"sample_id\":\"a\"}\n").unwrap();
        assert!(matches!(
            JudgmentStore::open(&path),
            Err(AnnError::Store { line: 1, .. })
        ));
    }

    #[test]
    fn sample_store_rejects_duplicates() {
        let s = EvalSample::new("x", "Chat", "p");
        assert!(SampleStore::new(vec![s.clone(), s]).is_err());
    }
}
