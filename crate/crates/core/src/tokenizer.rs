//! Byte-level BPE tokenizer.
//!
//! The base alphabet is the 256 byte values, so every UTF-8 string encodes
//! without an unknown-token path. Merges are learned greedily by pair
//! frequency; ties go to the lexicographically smaller `(left, right)` pair.
//! Reserved special tokens sit above the merge range and are never produced
//! by [`Vocab::encode`].

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

/// Desk-scale default vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

const BYTE_SYMBOLS: usize = 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocab size {target} is below the floor of {floor} (256 bytes + specials)")]
    TargetTooSmall { target: usize, floor: usize },
    #[error("token id {id} at position {position} is out of range for vocab of size {size}")]
    IdOutOfRange { id: TokenId, position: usize, size: usize },
    #[error("vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Reserved tokens used by the packer and the chat renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    SepDoc,
    RoleSystem,
    RoleUser,
    RoleAssistant,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Bos,
        Special::Eos,
        Special::Pad,
        Special::SepDoc,
        Special::RoleSystem,
        Special::RoleUser,
        Special::RoleAssistant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Bos => "BOS",
            Special::Eos => "EOS",
            Special::Pad => "PAD",
            Special::SepDoc => "SEP_DOC",
            Special::RoleSystem => "ROLE_SYSTEM",
            Special::RoleUser => "ROLE_USER",
            Special::RoleAssistant => "ROLE_ASSISTANT",
        }
    }

    fn from_name(name: &str) -> Option<Special> {
        Special::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Number of reserved special tokens.
pub const NUM_SPECIALS: usize = Special::ALL.len();

/// Smallest legal vocabulary: bytes plus specials, no merges.
pub const MIN_VOCAB_SIZE: usize = BYTE_SYMBOLS + NUM_SPECIALS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Merge {
    pub left: TokenId,
    pub right: TokenId,
    pub new: TokenId,
}

/// Immutable vocabulary: byte symbols, ordered merges, and specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    merges: Vec<Merge>,
    ranks: HashMap<(TokenId, TokenId), u32>,
    token_bytes: Vec<Vec<u8>>,
    special_ids: [TokenId; NUM_SPECIALS],
}

impl Vocab {
    /// Byte-only vocabulary (no merges).
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is always valid")
    }

    /// Builds a vocabulary from `(left, right)` pairs; new ids are assigned
    /// consecutively from 256.
    pub fn from_pairs(pairs: &[(TokenId, TokenId)]) -> Result<Self> {
        let merges = pairs
            .iter()
            .enumerate()
            .map(|(i, &(left, right))| Merge {
                left,
                right,
                new: (BYTE_SYMBOLS + i) as TokenId,
            })
            .collect();
        Self::from_merges(merges)
    }

    fn from_merges(merges: Vec<Merge>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            let expected = (BYTE_SYMBOLS + i) as TokenId;
            if m.new != expected || m.left >= m.new || m.right >= m.new {
                return Err(TokenizerError::Parse {
                    line: i + 2,
                    msg: format!(
                        "merge {} {} {} must define id {expected} from earlier ids",
                        m.left, m.right, m.new
                    ),
                });
            }
            let mut bytes = token_bytes[m.left as usize].clone();
            bytes.extend_from_slice(&token_bytes[m.right as usize]);
            token_bytes.push(bytes);
            ranks.entry((m.left, m.right)).or_insert(i as u32);
        }
        let base = (BYTE_SYMBOLS + merges.len()) as TokenId;
        let mut special_ids = [0; NUM_SPECIALS];
        for (i, id) in special_ids.iter_mut().enumerate() {
            *id = base + i as TokenId;
        }
        Ok(Self {
            merges,
            ranks,
            token_bytes,
            special_ids,
        })
    }

    pub fn size(&self) -> usize {
        BYTE_SYMBOLS + self.merges.len() + NUM_SPECIALS
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn special(&self, s: Special) -> TokenId {
        self.special_ids[s as usize]
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= self.special_ids[0] && (id as usize) < self.size()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies merges in rank order, leftmost occurrence first.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let n = bytes.len();
        let mut sym: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        if n < 2 || self.merges.is_empty() {
            return sym;
        }
        const NONE: usize = usize::MAX;
        let mut prev: Vec<usize> = (0..n).map(|i| if i == 0 { NONE } else { i - 1 }).collect();
        let mut next: Vec<usize> = (0..n).map(|i| if i + 1 == n { NONE } else { i + 1 }).collect();
        let mut alive = vec![true; n];
        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&r) = self.ranks.get(&(sym[i], sym[i + 1])) {
                heap.push(Reverse((r, i, sym[i], sym[i + 1])));
            }
        }
        while let Some(Reverse((rank, pos, left, right))) = heap.pop() {
            if !alive[pos] || sym[pos] != left {
                continue;
            }
            let j = next[pos];
            if j == NONE || sym[j] != right {
                continue;
            }
            sym[pos] = self.merges[rank as usize].new;
            alive[j] = false;
            next[pos] = next[j];
            if next[j] != NONE {
                prev[next[j]] = pos;
            }
            let p = prev[pos];
            if p != NONE {
                if let Some(&r) = self.ranks.get(&(sym[p], sym[pos])) {
                    heap.push(Reverse((r, p, sym[p], sym[pos])));
                }
            }
            let q = next[pos];
            if q != NONE {
                if let Some(&r) = self.ranks.get(&(sym[pos], sym[q])) {
                    heap.push(Reverse((r, pos, sym[pos], sym[q])));
                }
            }
        }
        sym.into_iter().zip(alive).filter_map(|(s, a)| a.then_some(s)).collect()
    }

    /// Concatenated bytes of `ids`; specials contribute nothing.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let size = self.size();
        let mut out = Vec::with_capacity(ids.len() * 2);
        for (position, &id) in ids.iter().enumerate() {
            match self.token_bytes.get(id as usize) {
                Some(bytes) => out.extend_from_slice(bytes),
                None if (id as usize) < size => {}
                None => {
                    return Err(TokenizerError::IdOutOfRange { id, position, size });
                }
            }
        }
        Ok(out)
    }

    /// Decodes to text. Byte runs that are not valid UTF-8 (a generation
    /// cut mid-character, say) are replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Byte length of a single token (0 for specials).
    pub fn token_len(&self, id: TokenId) -> usize {
        self.token_bytes.get(id as usize).map_or(0, Vec::len)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("bpe v1 {}\n", self.size());
        for m in &self.merges {
            let _ = writeln!(s, "{} {} {}", m.left, m.right, m.new);
        }
        s.push_str("specials\n");
        for sp in Special::ALL {
            let _ = writeln!(s, "{} {}", sp.name(), self.special(sp));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty vocab file"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let declared: usize = match parts.as_slice() {
            ["bpe", "v1", size] => size.parse().map_err(|_| parse_err(1, "size is not an integer"))?,
            _ => return Err(parse_err(1, "expected header `bpe v1 <size>`")),
        };
        let mut merges = Vec::new();
        let mut specials = HashMap::new();
        let mut in_specials = false;
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "specials" {
                in_specials = true;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if in_specials {
                let [name, id] = fields.as_slice() else {
                    return Err(parse_err(lineno, "expected `<NAME> <id>`"));
                };
                let sp =
                    Special::from_name(name).ok_or_else(|| parse_err(lineno, &format!("unknown special {name}")))?;
                let id: TokenId = id.parse().map_err(|_| parse_err(lineno, "bad special id"))?;
                specials.insert(sp, id);
            } else {
                let nums: Vec<TokenId> = fields
                    .iter()
                    .map(|f| f.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(lineno, "merge fields must be integers"))?;
                let [left, right, new] = nums.as_slice() else {
                    return Err(parse_err(lineno, "expected `<left> <right> <new>`"));
                };
                merges.push(Merge {
                    left: *left,
                    right: *right,
                    new: *new,
                });
            }
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.size() != declared {
            return Err(parse_err(
                1,
                &format!("header declares {declared} ids, file defines {}", vocab.size()),
            ));
        }
        for sp in Special::ALL {
            match specials.get(&sp) {
                Some(&id) if id == vocab.special(sp) => {}
                Some(&id) => {
                    return Err(parse_err(
                        0,
                        &format!("{} has id {id}, expected {}", sp.name(), vocab.special(sp)),
                    ))
                }
                None => return Err(parse_err(0, &format!("missing special {}", sp.name()))),
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Stable 64-bit fingerprint of the serialized vocabulary.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

fn parse_err(line: usize, msg: &str) -> TokenizerError {
    TokenizerError::Parse {
        line,
        msg: msg.to_string(),
    }
}

/// Result of BPE training.
#[derive(Debug, Clone)]
pub struct BpeTraining {
    pub vocab: Vocab,
    /// False when the corpus ran out of repeated pairs before the target size.
    pub reached_target: bool,
}

/// Learns merges until the vocabulary has `target_size` ids or no pair
/// occurs at least twice. Documents are merged independently; no merge
/// spans two documents.
pub fn train_bpe<I, S>(texts: I, target_size: usize) -> Result<BpeTraining>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if target_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            floor: MIN_VOCAB_SIZE,
        });
    }
    let wanted = target_size - MIN_VOCAB_SIZE;

    // Identical documents are collapsed with a multiplicity.
    let mut dedup: HashMap<Vec<TokenId>, i64> = HashMap::new();
    let mut order: Vec<Vec<TokenId>> = Vec::new();
    for t in texts {
        let ids: Vec<TokenId> = t.as_ref().bytes().map(TokenId::from).collect();
        if ids.len() < 2 {
            continue;
        }
        let e = dedup.entry(ids.clone()).or_insert(0);
        if *e == 0 {
            order.push(ids);
        }
        *e += 1;
    }
    let mut words: Vec<(Vec<TokenId>, i64)> = order
        .into_iter()
        .map(|w| {
            let f = dedup[&w];
            (w, f)
        })
        .collect();
    drop(dedup);

    let mut counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut where_: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (wi, (w, f)) in words.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_insert(0) += f;
            where_.entry(pair).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<(TokenId, TokenId)>)> =
        counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

    let mut pairs: Vec<(TokenId, TokenId)> = Vec::with_capacity(wanted);
    while pairs.len() < wanted {
        let Some((count, Reverse(pair))) = heap.pop() else {
            break;
        };
        if counts.get(&pair).copied().unwrap_or(0) != count {
            continue;
        }
        if count < 2 {
            break;
        }
        let new = (BYTE_SYMBOLS + pairs.len()) as TokenId;
        pairs.push(pair);

        let mut touched: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut delta: HashMap<(TokenId, TokenId), i64> = HashMap::new();
        for wi in touched {
            let (w, f) = &mut words[wi];
            if !w.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            for p in w.windows(2) {
                *delta.entry((p[0], p[1])).or_insert(0) -= *f;
            }
            let mut merged = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                    merged.push(new);
                    i += 2;
                } else {
                    merged.push(w[i]);
                    i += 1;
                }
            }
            *w = merged;
            for p in w.windows(2) {
                let np = (p[0], p[1]);
                *delta.entry(np).or_insert(0) += *f;
                where_.entry(np).or_default().insert(wi);
            }
        }
        let mut changed: Vec<_> = delta.into_iter().filter(|&(_, d)| d != 0).collect();
        changed.sort_unstable();
        for (p, d) in changed {
            let c = counts.entry(p).or_insert(0);
            *c += d;
            if *c > 0 {
                heap.push((*c, Reverse(p)));
            } else {
                counts.remove(&p);
            }
        }
        counts.remove(&pair);
    }
    let reached_target = pairs.len() == wanted;
    if !reached_target {
        log::warn!(
            "corpus too small: learned {} of {} requested merges",
            pairs.len(),
            wanted
        );
    }
    Ok(BpeTraining {
        vocab: Vocab::from_pairs(&pairs)?,
        reached_target,
    })
}
