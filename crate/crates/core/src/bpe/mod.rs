//! Acoustic byte-pair encoding over discrete speech tokens.
//!
//! Base tokens `0..K` are treated as characters. Each learned merge rule joins an
//! ordered pair of ids into a fresh id `K + rank`, so a [`BpeVocab`] is fully
//! described by its base size and its ordered merge list. Utterances are the only
//! "words": merges never bridge two utterances.
//!
//! The same tokens can be exchanged with text-based subword tools through a fixed
//! codepoint offset (by default the start of the CJK Unified Ideographs block), see
//! [`tokens_to_codepoints`] and [`codepoints_to_tokens`].

mod encode;
mod train;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{format_id_lines, read_id_file, TokenSequence};
use crate::error::{Error, Result};

pub use train::{bpe_train, BpeTrainer};

pub const VOCAB_MAGIC: &str = "ABPEVOC1";

/// First codepoint of the CJK Unified Ideographs block.
pub const DEFAULT_CODEPOINT_OFFSET: u32 = 0x4E00;

const SURROGATES: std::ops::RangeInclusive<u32> = 0xD800..=0xDFFF;
const MAX_SCALAR: u32 = 0x10FFFF;

#[inline]
pub(crate) fn pack(left: u32, right: u32) -> u64 {
    (u64::from(left) << 32) | u64::from(right)
}

#[inline]
pub(crate) fn unpack(pair: u64) -> (u32, u32) {
    ((pair >> 32) as u32, pair as u32)
}

/// Base alphabet, codepoint offset and ordered merge rules.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    base_size: u32,
    offset: u32,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<u64, u32>,
    expansions: Vec<Vec<u32>>,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.base_size == other.base_size
            && self.offset == other.offset
            && self.merges == other.merges
    }
}

impl Eq for BpeVocab {}

impl BpeVocab {
    pub fn new(base_size: u32, offset: u32, merges: Vec<(u32, u32)>) -> Result<Self> {
        if base_size == 0 {
            return Err(Error::domain("base alphabet size must be positive"));
        }
        check_codepoint_range(offset, base_size)?;
        let total = u64::from(base_size) + merges.len() as u64;
        if total > u64::from(u32::MAX) {
            return Err(Error::domain("vocabulary size overflows u32"));
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        let mut expansions: Vec<Vec<u32>> = (0..base_size).map(|t| vec![t]).collect();
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let id = base_size + rank as u32;
            if l >= id || r >= id {
                return Err(Error::domain(format!(
                    "merge #{rank} ({l}, {r}) references an id not below its own id {id}"
                )));
            }
            if ranks.insert(pack(l, r), rank as u32).is_some() {
                return Err(Error::domain(format!("merge ({l}, {r}) appears twice")));
            }
            let mut exp = expansions[l as usize].clone();
            exp.extend_from_slice(&expansions[r as usize]);
            expansions.push(exp);
        }
        Ok(Self {
            base_size,
            offset,
            merges,
            ranks,
            expansions,
        })
    }

    /// A vocabulary without merges: encoding is the identity.
    pub fn identity(base_size: u32) -> Result<Self> {
        Self::new(base_size, DEFAULT_CODEPOINT_OFFSET, Vec::new())
    }

    pub fn base_size(&self) -> u32 {
        self.base_size
    }

    pub fn offset(&self) -> u32 {
        self.offset
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> u32 {
        self.base_size + self.merges.len() as u32
    }

    pub(crate) fn rank(&self, left: u32, right: u32) -> Option<u32> {
        self.ranks.get(&pack(left, right)).copied()
    }

    /// Base tokens spelled by `id`.
    pub fn expansion(&self, id: u32) -> Option<&[u32]> {
        self.expansions.get(id as usize).map(Vec::as_slice)
    }

    /// Keeps only the first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        let merges = self.merges[..n.min(self.merges.len())].to_vec();
        Self::new(self.base_size, self.offset, merges).expect("prefix of a valid vocab is valid")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{VOCAB_MAGIC} K={} OFFSET={:#06X}\n",
            self.base_size, self.offset
        );
        for &(l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty vocab file"))?;
        let mut fields = header.split_ascii_whitespace();
        if fields.next() != Some(VOCAB_MAGIC) {
            return Err(Error::parse(1, format!("expected {VOCAB_MAGIC} header")));
        }
        let mut base = None;
        let mut offset = None;
        for f in fields {
            match f.split_once('=') {
                Some(("K", v)) => {
                    base = Some(v.parse::<u32>().map_err(|_| Error::parse(1, "bad K"))?)
                }
                Some(("OFFSET", v)) => {
                    let hex = v.trim_start_matches("0x").trim_start_matches("0X");
                    offset = Some(
                        u32::from_str_radix(hex, 16).map_err(|_| Error::parse(1, "bad OFFSET"))?,
                    )
                }
                _ => return Err(Error::parse(1, format!("unknown header field {f:?}"))),
            }
        }
        let base = base.ok_or_else(|| Error::parse(1, "header lacks K="))?;
        let offset = offset.ok_or_else(|| Error::parse(1, "header lacks OFFSET="))?;
        let mut merges = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_ascii_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(l)), Some(Ok(r)), None) => merges.push((l, r)),
                _ => return Err(Error::parse(lineno, "expected `<left_id> <right_id>`")),
            }
        }
        Self::new(base, offset, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// An utterance after BPE encoding; every id is below `vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeSequence {
    utt_id: String,
    ids: Vec<u32>,
    vocab_size: u32,
}

impl BpeSequence {
    pub fn new(utt_id: impl Into<String>, ids: Vec<u32>, vocab_size: u32) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::domain("BPE sequence must be non-empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::domain(format!(
                "id {bad} is outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self {
            utt_id: utt_id.into(),
            ids,
            vocab_size,
        })
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_codepoint_range(offset: u32, k: u32) -> Result<()> {
    let end = u64::from(offset) + u64::from(k);
    if end > u64::from(MAX_SCALAR) {
        return Err(Error::domain(format!(
            "codepoint range {offset:#X}+{k} runs past U+10FFFF"
        )));
    }
    let last = end as u32 - 1;
    if offset <= *SURROGATES.end() && last >= *SURROGATES.start() {
        return Err(Error::domain(format!(
            "codepoint range {offset:#X}..={last:#X} overlaps the surrogate block"
        )));
    }
    Ok(())
}

/// Maps token `t` to the character `offset + t`.
pub fn tokens_to_codepoints(seq: &TokenSequence, offset: u32) -> Result<String> {
    check_codepoint_range(offset, seq.alphabet_size())?;
    seq.tokens()
        .iter()
        .map(|&t| {
            char::from_u32(offset + t)
                .ok_or_else(|| Error::domain(format!("token {t} has no codepoint")))
        })
        .collect()
}

/// Inverse of [`tokens_to_codepoints`].
pub fn codepoints_to_tokens(
    utt_id: impl Into<String>,
    s: &str,
    offset: u32,
    k: u32,
) -> Result<TokenSequence> {
    check_codepoint_range(offset, k)?;
    let tokens = s
        .chars()
        .enumerate()
        .map(|(pos, c)| {
            let cp = c as u32;
            cp.checked_sub(offset).filter(|&t| t < k).ok_or_else(|| {
                Error::domain(format!(
                    "codepoint U+{cp:04X} at position {pos} is outside [{offset:#X}, {:#X})",
                    offset + k
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::new(utt_id, tokens, k)
}

/// Writes one mapped utterance per line, for external subword tools.
pub fn write_codepoint_export(
    seqs: &[TokenSequence],
    offset: u32,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&tokens_to_codepoints(s, offset)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a codepoint export back; utterance ids are the 1-based line numbers.
pub fn read_codepoint_export(
    path: impl AsRef<Path>,
    offset: u32,
    k: u32,
) -> Result<Vec<TokenSequence>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| codepoints_to_tokens(format!("{}", i + 1), l, offset, k))
        .collect()
}

fn check_alphabet(seq: &TokenSequence, vocab: &BpeVocab) -> Result<()> {
    if seq.alphabet_size() != vocab.base_size {
        return Err(Error::domain(format!(
            "sequence {:?} has alphabet {} but vocabulary base size is {}",
            seq.utt_id(),
            seq.alphabet_size(),
            vocab.base_size
        )));
    }
    Ok(())
}

/// Applies the merge rules in training order.
pub fn bpe_encode(seq: &TokenSequence, vocab: &BpeVocab) -> Result<BpeSequence> {
    check_alphabet(seq, vocab)?;
    let ids = encode::encode_ids(vocab, seq.tokens());
    BpeSequence::new(seq.utt_id(), ids, vocab.vocab_size())
}

pub fn bpe_encode_corpus(corpus: &[TokenSequence], vocab: &BpeVocab) -> Result<Vec<BpeSequence>> {
    corpus.par_iter().map(|s| bpe_encode(s, vocab)).collect()
}

/// Expands every id through the merge table.
pub fn bpe_decode(seq: &BpeSequence, vocab: &BpeVocab) -> Result<TokenSequence> {
    let tokens = decode_ids(seq.ids(), vocab)?;
    TokenSequence::new(seq.utt_id(), tokens, vocab.base_size)
}

pub fn decode_ids(ids: &[u32], vocab: &BpeVocab) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(ids.len() * 2);
    for &id in ids {
        let exp = vocab.expansion(id).ok_or_else(|| {
            Error::domain(format!(
                "id {id} is outside vocabulary of size {}",
                vocab.vocab_size()
            ))
        })?;
        out.extend_from_slice(exp);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionStats {
    pub mean_ratio: f64,
    pub total_base_tokens: usize,
    pub total_bpe_ids: usize,
    pub per_utt: Vec<f64>,
}

/// Per-utterance and corpus-level length reduction.
pub fn compression_stats(corpus: &[TokenSequence], vocab: &BpeVocab) -> Result<CompressionStats> {
    if corpus.is_empty() {
        return Err(Error::domain("compression stats need a non-empty corpus"));
    }
    let encoded = bpe_encode_corpus(corpus, vocab)?;
    let per_utt: Vec<f64> = corpus
        .iter()
        .zip(&encoded)
        .map(|(s, e)| s.len() as f64 / e.len() as f64)
        .collect();
    Ok(CompressionStats {
        mean_ratio: per_utt.iter().sum::<f64>() / per_utt.len() as f64,
        total_base_tokens: corpus.iter().map(TokenSequence::len).sum(),
        total_bpe_ids: encoded.iter().map(BpeSequence::len).sum(),
        per_utt,
    })
}

pub fn format_bpe_file(seqs: &[BpeSequence]) -> Result<String> {
    let v = seqs
        .first()
        .map(BpeSequence::vocab_size)
        .ok_or_else(|| Error::domain("nothing to serialize: empty sequence list"))?;
    if seqs.iter().any(|s| s.vocab_size != v) {
        return Err(Error::domain("BPE sequences have mixed vocabulary sizes"));
    }
    format_id_lines('V', v, seqs.iter().map(|s| (s.utt_id(), s.ids())))
}

pub fn write_bpe_file(seqs: &[BpeSequence], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_bpe_file(seqs)?)?;
    Ok(())
}

/// Reads a `V=` file. A `K=` file is accepted too and read as identity-encoded ids.
pub fn read_bpe_file(path: impl AsRef<Path>) -> Result<Vec<BpeSequence>> {
    let file = read_id_file(path, &['V', 'K'])?;
    file.rows
        .into_iter()
        .map(|(id, ids)| BpeSequence::new(id, ids, file.size))
        .collect()
}
