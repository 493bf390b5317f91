//! Fixed-quota sampling of the test set and offline greedy generation.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lowres_core::databuild::{render_prompt, InstructionRecord, Role};
use lowres_core::model::{greedy_generate_ids, ModelConfig, Params};
use lowres_core::tokenizer::{Special, Vocab};

use crate::{AnnError, EvalSample, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub category: String,
    pub count: usize,
}

/// Ordered category quotas. Sampling output follows this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaMap {
    #[serde(rename = "quota")]
    pub entries: Vec<Quota>,
}

impl Default for QuotaMap {
    /// 100 instructions over nine categories, coding excluded.
    fn default() -> Self {
        QuotaMap::new([
            ("Generation", 25),
            ("Brainstorming", 15),
            ("Chat", 15),
            ("Open QA", 13),
            ("Classification", 12),
            ("Closed QA", 5),
            ("Extraction", 5),
            ("Rewriting", 5),
            ("Summarization", 5),
        ])
    }
}

impl QuotaMap {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, usize)>) -> Self {
        QuotaMap {
            entries: entries
                .into_iter()
                .map(|(c, n)| Quota {
                    category: c.into(),
                    count: n,
                })
                .collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|q| q.count).sum()
    }

    pub fn get(&self, category: &str) -> Option<usize> {
        self.entries.iter().find(|q| q.category == category).map(|q| q.count)
    }
}

/// The categories excluded by default.
pub fn default_exclude() -> BTreeSet<String> {
    BTreeSet::from(["coding".to_string()])
}

fn category_seed(seed: u64, category: &str) -> u64 {
    let h = Sha256::digest(category.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Draws exactly `quota` items per category without replacement. Excluded
/// categories (compared case-insensitively) are never drawn. Output order
/// is quota order, then draw order.
pub fn stratified_sample(
    testset: &[EvalSample],
    quotas: &QuotaMap,
    exclude: &BTreeSet<String>,
    seed: u64,
) -> Result<Vec<EvalSample>> {
    let excluded = |c: &str| exclude.iter().any(|e| e.eq_ignore_ascii_case(c));
    let mut ids = BTreeSet::new();
    for s in testset {
        s.validate()?;
        if !ids.insert(s.id.as_str()) {
            return Err(AnnError::DuplicateSample(s.id.clone()));
        }
    }
    let mut out = Vec::with_capacity(quotas.total());
    for q in &quotas.entries {
        if excluded(&q.category) || q.count == 0 {
            continue;
        }
        let pool: Vec<&EvalSample> = testset.iter().filter(|s| s.category == q.category).collect();
        if pool.len() < q.count {
            return Err(AnnError::InsufficientItems {
                category: q.category.clone(),
                available: pool.len(),
                quota: q.count,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(category_seed(seed, &q.category));
        for i in rand::seq::index::sample(&mut rng, pool.len(), q.count) {
            out.push(pool[i].clone());
        }
    }
    Ok(out)
}

/// A test-set sample from a chat record: the first user turn is the
/// prompt and the first assistant turn the reference.
pub fn sample_from_record(id: impl Into<String>, rec: &InstructionRecord) -> Result<EvalSample> {
    let first = |role: Role| rec.messages.iter().find(|m| m.role == role).map(|m| m.content.clone());
    let mut s = EvalSample::new(id, rec.category.clone(), first(Role::User).unwrap_or_default());
    s.reference = first(Role::Assistant);
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generated: usize,
    pub failed: usize,
}

/// Fills `outputs[model_id]` with the greedy continuation of each prompt,
/// stopping at end-of-sequence or after `max_new` tokens. A failure is
/// recorded under `errors[model_id]` and the other samples proceed.
pub fn generate_outputs(
    samples: &mut [EvalSample],
    model_id: &str,
    params: &Params,
    cfg: &ModelConfig,
    vocab: &Vocab,
    max_new: usize,
) -> GenerationSummary {
    let eos = vocab.special(Special::Eos);
    let results: Vec<std::result::Result<String, String>> = samples
        .par_iter()
        .map(|s| {
            let prompt = render_prompt(&s.prompt, vocab);
            let ids = greedy_generate_ids(params, cfg, &prompt, max_new, &[eos]).map_err(|e| e.to_string())?;
            vocab.decode(&ids).map_err(|e| e.to_string())
        })
        .collect();
    let mut summary = GenerationSummary::default();
    for (s, r) in samples.iter_mut().zip(results) {
        match r {
            Ok(text) => {
                s.errors.remove(model_id);
                s.outputs.insert(model_id.to_string(), text);
                summary.generated += 1;
            }
            Err(e) => {
                log::warn!("sample {}: generation failed: {e}", s.id);
                s.outputs.remove(model_id);
                s.errors.insert(model_id.to_string(), e);
                summary.failed += 1;
            }
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn testset(per_cat: usize) -> Vec<EvalSample> {
        let mut cats: Vec<String> = QuotaMap::default().entries.into_iter().map(|q| q.category).collect();
        cats.push("Coding".into());
        let mut out = Vec::new();
        for c in &cats {
            for i in 0..per_cat {
                out.push(EvalSample::new(
                    format!("{c}-{i}"),
                    c.clone(),
                    format!("{c} prompt {i}"),
                ));
            }
        }
        out
    }

    #[test]
    fn default_quotas_total_100() {
        let q = QuotaMap::default();
        assert_eq!(q.total(), 100);
        assert_eq!(q.get("Open QA"), Some(13));
        assert_eq!(q.get("Coding"), None);
    }

    #[test]
    fn quotas_are_exact_and_ordered() {
        let ts = testset(40);
        let q = QuotaMap::default();
        let s = stratified_sample(&ts, &q, &default_exclude(), 4).unwrap();
        assert_eq!(s.len(), 100);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for x in &s {
            *counts.entry(&x.category).or_default() += 1;
        }
        for e in &q.entries {
            assert_eq!(counts[e.category.as_str()], e.count);
        }
        assert_eq!(s[0].category, "Generation");
        assert_eq!(s[99].category, "Summarization");
        let ids: BTreeSet<&str> = s.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn exclusion_beats_quota() {
        let ts = testset(30);
        let mut q = QuotaMap::default();
        q.entries.push(Quota {
            category: "Coding".into(),
            count: 5,
        });
        let s = stratified_sample(&ts, &q, &default_exclude(), 1).unwrap();
        assert!(s.iter().all(|x| !x.category.eq_ignore_ascii_case("coding")));
        assert_eq!(s.len(), 100);
    }

    #[test]
    fn seeded() {
        let ts = testset(30);
        let q = QuotaMap::default();
        let ids = |seed| {
            stratified_sample(&ts, &q, &default_exclude(), seed)
                .unwrap()
                .into_iter()
                .map(|s| s.id)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(3), ids(3));
        assert_ne!(ids(3), ids(4));
    }

    #[test]
    fn shortage_names_category() {
        let ts = testset(20);
        let err = stratified_sample(&ts, &QuotaMap::default(), &default_exclude(), 0).unwrap_err();
        match err {
            AnnError::InsufficientItems {
                category,
                available,
                quota,
            } => {
                assert_eq!((category.as_str(), available, quota), ("Generation", 20, 25));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn record_conversion() {
        let rec = InstructionRecord::single("idatzi olerki bat", "hona hemen", "Generation");
        let s = sample_from_record("r1", &rec).unwrap();
        assert_eq!(s.prompt, "idatzi olerki bat");
        assert_eq!(s.reference.as_deref(), Some("hona hemen"));
    }
}
