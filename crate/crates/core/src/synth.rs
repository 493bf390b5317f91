//! Deterministic toy data: pseudo-word corpora, instruction records and
//! preference triplets drawn from a seeded generator. Used for smoke runs
//! and tests where the real corpora are unavailable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::databuild::{InstructionRecord, PreferenceTriplet};
use crate::tokenizer::{train_bpe, BpeTraining, Result};

const ONSETS: [&str; 16] = [
    "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "z", "x", "tx", "ts", "h",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 5] = ["", "", "n", "k", "r"];

/// Instruction categories of the manual-evaluation test set.
pub const CATEGORIES: [&str; 10] = [
    "Generation",
    "Brainstorming",
    "Chat",
    "Open QA",
    "Classification",
    "Closed QA",
    "Extraction",
    "Rewriting",
    "Summarization",
    "Coding",
];

/// A fixed lexicon of pseudo-words with a Zipf-like sampler over it.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: Vec<String>,
    cumulative: Vec<f64>,
}

impl Lexicon {
    pub fn new(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = Vec::with_capacity(size);
        let mut seen = std::collections::HashSet::new();
        while words.len() < size {
            let n_syl = rng.random_range(1..=4);
            let mut w = String::new();
            for _ in 0..n_syl {
                w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
                w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let mut acc = 0.0;
        let cumulative = (1..=size)
            .map(|r| {
                acc += 1.0 / r as f64;
                acc
            })
            .collect();
        Lexicon { words, cumulative }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word<R: Rng>(&self, rng: &mut R) -> &str {
        let total = *self.cumulative.last().expect("non-empty lexicon");
        let x = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= x).min(self.words.len() - 1);
        &self.words[i]
    }

    pub fn sentence<R: Rng>(&self, rng: &mut R, n_words: usize) -> String {
        let words: Vec<&str> = (0..n_words).map(|_| self.word(rng)).collect();
        words.join(" ")
    }
}

/// `n` documents; each is `eu` with probability `eu_fraction`, otherwise
/// `en`. The two languages use disjoint lexicons.
pub fn documents(n: usize, eu_fraction: f64, seed: u64) -> Vec<Document> {
    let eu = Lexicon::new(800, seed);
    let en = Lexicon::new(800, seed ^ 0x5555);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    (0..n)
        .map(|i| {
            let is_eu = rng.random::<f64>() < eu_fraction;
            let len = rng.random_range(5..60);
            let (lex, lang) = if is_eu { (&eu, "eu") } else { (&en, "en") };
            let text = lex.sentence(&mut rng, len);
            Document::new(format!("doc-{i:05}"), text, lang)
                .expect("generated text is valid")
                .with_source("synthetic")
        })
        .collect()
}

/// Trains a BPE vocabulary of `size` on generated text.
pub fn tokenizer(size: usize, seed: u64) -> Result<BpeTraining> {
    let lex = Lexicon::new(3000, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let texts: Vec<String> = (0..1000).map(|_| lex.sentence(&mut rng, 40)).collect();
    train_bpe(&texts, size)
}

/// Single-turn records with short prompts and responses, cycling through
/// [`CATEGORIES`].
pub fn instructions(n: usize, response_words: usize, seed: u64) -> Vec<InstructionRecord> {
    let lex = Lexicon::new(400, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    (0..n)
        .map(|i| {
            let prompt = format!("{i} {}", lex.sentence(&mut rng, 3));
            let answer = lex.sentence(&mut rng, response_words);
            let mut rec = InstructionRecord::single(&prompt, &answer, CATEGORIES[i % CATEGORIES.len()]);
            rec.source = "synthetic".into();
            rec
        })
        .collect()
}

/// Triplets with distinct chosen/rejected responses.
pub fn preferences(n: usize, seed: u64) -> Vec<PreferenceTriplet> {
    let lex = Lexicon::new(400, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    (0..n)
        .map(|i| {
            let prompt = format!("{i} {}", lex.sentence(&mut rng, 3));
            let chosen = lex.sentence(&mut rng, 3);
            let mut rejected = lex.sentence(&mut rng, 3);
            while rejected == chosen {
                rejected = lex.sentence(&mut rng, 3);
            }
            PreferenceTriplet {
                prompt,
                chosen,
                rejected,
                language: "eu".into(),
            }
        })
        .collect()
}
