//! Language-separated sequence packing.
//!
//! One buffer is kept per language. Each document is encoded, suffixed with
//! `SEP_DOC`, and appended to its language's buffer; whenever a buffer holds
//! at least `S` tokens a sequence of exactly `S` tokens is cut from its front.
//! Documents may therefore continue in the next sequence of the same
//! language, but no sequence ever mixes languages.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::tokenizer::{Special, TokenId, Vocab};

#[derive(Debug, Error)]
pub enum PackError {
    #[error("sequence length must be at least 2, got {0}")]
    SeqLenTooSmall(usize),
    #[error("shard: {0}")]
    Shard(String),
    #[error("shard was packed with vocab {found:016x}, expected {expected:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalPolicy {
    Pad,
    Drop,
}

impl std::str::FromStr for FinalPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pad" => Ok(FinalPolicy::Pad),
            "drop" => Ok(FinalPolicy::Drop),
            other => Err(format!("unknown final policy `{other}` (expected pad or drop)")),
        }
    }
}

/// A fixed-length, single-language block of training tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<TokenId>,
    pub language: String,
    /// Start offsets of document segments: index 0 plus every non-PAD
    /// position directly after a `SEP_DOC`.
    pub doc_boundaries: Vec<usize>,
    /// False exactly on PAD positions.
    pub loss_mask: Vec<bool>,
}

impl PackedSequence {
    /// Rebuilds boundaries and mask from raw tokens.
    pub fn from_tokens(tokens: Vec<TokenId>, language: String, vocab: &Vocab) -> Self {
        let pad = vocab.special(Special::Pad);
        let sep = vocab.special(Special::SepDoc);
        let loss_mask: Vec<bool> = tokens.iter().map(|&t| t != pad).collect();
        let mut doc_boundaries = Vec::new();
        if tokens.first().is_some_and(|&t| t != pad) {
            doc_boundaries.push(0);
        }
        for i in 1..tokens.len() {
            if tokens[i - 1] == sep && tokens[i] != pad {
                doc_boundaries.push(i);
            }
        }
        PackedSequence {
            tokens,
            language,
            doc_boundaries,
            loss_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Count of non-PAD tokens.
    pub fn real_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Streaming packer. Feed documents with [`Packer::push`], then call
/// [`Packer::finish`] to flush partial buffers.
pub struct Packer<'v> {
    vocab: &'v Vocab,
    seq_len: usize,
    policy: FinalPolicy,
    buffers: BTreeMap<String, VecDeque<TokenId>>,
}

impl<'v> Packer<'v> {
    pub fn new(vocab: &'v Vocab, seq_len: usize, policy: FinalPolicy) -> Result<Self> {
        if seq_len < 2 {
            return Err(PackError::SeqLenTooSmall(seq_len));
        }
        Ok(Packer {
            vocab,
            seq_len,
            policy,
            buffers: BTreeMap::new(),
        })
    }

    pub fn push_tokens(&mut self, language: &str, ids: &[TokenId], out: &mut Vec<PackedSequence>) {
        let buf = self.buffers.entry(language.to_string()).or_default();
        buf.extend(ids.iter().copied());
        buf.push_back(self.vocab.special(Special::SepDoc));
        while buf.len() >= self.seq_len {
            let tokens: Vec<TokenId> = buf.drain(..self.seq_len).collect();
            out.push(PackedSequence::from_tokens(tokens, language.to_string(), self.vocab));
        }
    }

    pub fn push(&mut self, doc: &Document, out: &mut Vec<PackedSequence>) {
        let ids = self.vocab.encode(&doc.text);
        self.push_tokens(&doc.language, &ids, out);
    }

    /// Flushes remaining buffers in language-alphabetical order.
    pub fn finish(self, out: &mut Vec<PackedSequence>) {
        if self.policy == FinalPolicy::Drop {
            return;
        }
        let pad = self.vocab.special(Special::Pad);
        for (lang, buf) in self.buffers {
            if buf.is_empty() {
                continue;
            }
            let mut tokens: Vec<TokenId> = buf.into_iter().collect();
            tokens.resize(self.seq_len, pad);
            out.push(PackedSequence::from_tokens(tokens, lang, self.vocab));
        }
    }
}

/// Lazy packing iterator over a document stream.
pub struct Pack<'v, I> {
    docs: I,
    packer: Option<Packer<'v>>,
    ready: VecDeque<PackedSequence>,
}

impl<'v, I: Iterator<Item = Document>> Iterator for Pack<'v, I> {
    type Item = PackedSequence;

    fn next(&mut self) -> Option<PackedSequence> {
        let mut out = Vec::new();
        loop {
            if let Some(s) = self.ready.pop_front() {
                return Some(s);
            }
            let packer = self.packer.as_mut()?;
            match self.docs.next() {
                Some(doc) => packer.push(&doc, &mut out),
                None => self.packer.take()?.finish(&mut out),
            }
            self.ready.extend(out.drain(..));
        }
    }
}

pub fn pack<'v, I>(docs: I, vocab: &'v Vocab, seq_len: usize, policy: FinalPolicy) -> Result<Pack<'v, I::IntoIter>>
where
    I: IntoIterator<Item = Document>,
{
    Ok(Pack {
        docs: docs.into_iter(),
        packer: Some(Packer::new(vocab, seq_len, policy)?),
        ready: VecDeque::new(),
    })
}

/// Non-PAD tokens over total slots; 1.0 for an empty stream.
pub fn packing_efficiency<'a>(seqs: impl IntoIterator<Item = &'a PackedSequence>) -> f64 {
    let (real, slots) = seqs
        .into_iter()
        .fold((0usize, 0usize), |(r, s), seq| (r + seq.real_tokens(), s + seq.len()));
    if slots == 0 {
        1.0
    } else {
        real as f64 / slots as f64
    }
}

const SHARD_MAGIC: &[u8; 4] = b"LRPK";
const SHARD_VERSION: u32 = 1;

/// Writes a packed shard:
///
/// ```text
/// magic "LRPK" | version u32 | S u32 | vocab hash u64 | count u64
/// per sequence: language [u8; 2] | S × u32 token ids | ceil(S/8) mask bytes (LSB first)
/// ```
///
/// All integers little-endian.
pub fn write_shard<W: Write>(mut w: W, seq_len: usize, vocab_hash: u64, seqs: &[PackedSequence]) -> Result<()> {
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    w.write_all(&(seq_len as u32).to_le_bytes())?;
    w.write_all(&vocab_hash.to_le_bytes())?;
    w.write_all(&(seqs.len() as u64).to_le_bytes())?;
    let mut mask = vec![0u8; seq_len.div_ceil(8)];
    for s in seqs {
        if s.len() != seq_len {
            return Err(PackError::Shard(format!(
                "sequence of length {} in shard of S={seq_len}",
                s.len()
            )));
        }
        let lang = s.language.as_bytes();
        if lang.len() != 2 {
            return Err(PackError::Shard(format!(
                "language `{}` is not a two-letter code",
                s.language
            )));
        }
        w.write_all(lang)?;
        let mut bytes = Vec::with_capacity(seq_len * 4);
        for t in &s.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        w.write_all(&bytes)?;
        mask.fill(0);
        for (i, &m) in s.loss_mask.iter().enumerate() {
            if m {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&mask)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Shard {
    pub seq_len: usize,
    pub vocab_hash: u64,
    pub sequences: Vec<PackedSequence>,
}

pub fn read_shard<R: Read>(mut r: R, vocab: &Vocab) -> Result<Shard> {
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if &b4 != SHARD_MAGIC {
        return Err(PackError::Shard("bad magic".into()));
    }
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != SHARD_VERSION {
        return Err(PackError::Shard(format!("unsupported shard version {version}")));
    }
    r.read_exact(&mut b4)?;
    let seq_len = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let vocab_hash = u64::from_le_bytes(b8);
    if vocab_hash != vocab.hash() {
        return Err(PackError::VocabMismatch {
            expected: vocab.hash(),
            found: vocab_hash,
        });
    }
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut sequences = Vec::with_capacity(count.min(1 << 20));
    let mut tok_bytes = vec![0u8; seq_len * 4];
    let mut mask = vec![0u8; seq_len.div_ceil(8)];
    for _ in 0..count {
        let mut lang = [0u8; 2];
        r.read_exact(&mut lang)?;
        r.read_exact(&mut tok_bytes)?;
        r.read_exact(&mut mask)?;
        let tokens: Vec<TokenId> = tok_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let language =
            String::from_utf8(lang.to_vec()).map_err(|_| PackError::Shard("language is not utf-8".into()))?;
        let seq = PackedSequence::from_tokens(tokens, language, vocab);
        let stored: Vec<bool> = (0..seq_len).map(|i| mask[i / 8] & (1 << (i % 8)) != 0).collect();
        if stored != seq.loss_mask {
            return Err(PackError::Shard("stored loss mask disagrees with PAD positions".into()));
        }
        sequences.push(seq);
    }
    Ok(Shard {
        seq_len,
        vocab_hash,
        sequences,
    })
}

pub fn save_shard(path: impl AsRef<Path>, seq_len: usize, vocab: &Vocab, seqs: &[PackedSequence]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_shard(f, seq_len, vocab.hash(), seqs)
}

pub fn load_shard(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Shard> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_shard(f, vocab)
}
