//! Corpus containers, on-disk formats and the synthetic paired-corpus generator.
//!
//! Two file families live here:
//!
//! * a line-oriented text format for id sequences. The first line is a header
//!   `K=<n>` (base tokens), `P=<n>` (phoneme symbols) or `V=<n>` (BPE ids); every
//!   following non-blank line is `<utt_id>\t<id> <id> ...`.
//! * a little-endian binary format for feature matrices, tagged with the magic
//!   `ABPEFT01`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"ABPEFT01";

/// Frame shift of HuBERT-style 50 Hz token streams.
pub const DEFAULT_FRAME_SHIFT_MS: f32 = 20.0;

/// A `T x D` matrix of `f32` frames with an utterance id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    utt_id: String,
    frame_shift_ms: f32,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(
        utt_id: impl Into<String>,
        frame_shift_ms: f32,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!(
                "feature matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "feature payload has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if !(frame_shift_ms.is_finite() && frame_shift_ms > 0.0) {
            return Err(Error::domain(format!(
                "frame shift must be positive, got {frame_shift_ms}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite feature value at row {}, col {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self {
            utt_id: utt_id.into(),
            frame_shift_ms,
            rows,
            cols,
            data,
        })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(
        utt_id: impl Into<String>,
        frame_shift_ms: f32,
        rows: &[Vec<f32>],
    ) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("rows of a feature matrix must share one width"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(utt_id, frame_shift_ms, rows.len(), cols, data)
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }

    pub fn frame_shift_ms(&self) -> f32 {
        self.frame_shift_ms
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }
}

/// Discrete unit sequence produced by quantization; every token is below `alphabet_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    utt_id: String,
    tokens: Vec<u32>,
    alphabet_size: u32,
}

impl TokenSequence {
    pub fn new(utt_id: impl Into<String>, tokens: Vec<u32>, alphabet_size: u32) -> Result<Self> {
        check_ids("token", &tokens, alphabet_size)?;
        Ok(Self {
            utt_id: utt_id.into(),
            tokens,
            alphabet_size,
        })
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn alphabet_size(&self) -> u32 {
        self.alphabet_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }
}

/// Phoneme-like condition stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    utt_id: String,
    symbols: Vec<u32>,
    alphabet_size: u32,
}

impl SymbolSequence {
    pub fn new(utt_id: impl Into<String>, symbols: Vec<u32>, alphabet_size: u32) -> Result<Self> {
        check_ids("symbol", &symbols, alphabet_size)?;
        Ok(Self {
            utt_id: utt_id.into(),
            symbols,
            alphabet_size,
        })
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn alphabet_size(&self) -> u32 {
        self.alphabet_size
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

fn check_ids(what: &str, ids: &[u32], alphabet_size: u32) -> Result<()> {
    if alphabet_size == 0 {
        return Err(Error::domain(format!("{what} alphabet size must be positive")));
    }
    if ids.is_empty() {
        return Err(Error::domain(format!("{what} sequence must be non-empty")));
    }
    if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id >= alphabet_size) {
        return Err(Error::domain(format!(
            "{what} {id} at position {pos} is outside alphabet of size {alphabet_size}"
        )));
    }
    Ok(())
}

/// Header-tagged id list file contents, before being typed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdListFile {
    pub header: char,
    pub size: u32,
    pub rows: Vec<(String, Vec<u32>)>,
}

/// Serializes an id list file. Output is byte-stable for identical input.
pub fn format_id_lines<'a>(
    header: char,
    size: u32,
    rows: impl IntoIterator<Item = (&'a str, &'a [u32])>,
) -> Result<String> {
    let mut out = format!("{header}={size}\n");
    let mut any = false;
    for (id, ids) in rows {
        if id.contains(['\t', '\n', '\r']) {
            return Err(Error::domain(format!(
                "utterance id {id:?} contains a tab or line break"
            )));
        }
        out.push_str(id);
        out.push('\t');
        for (i, v) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
        any = true;
    }
    if !any {
        return Err(Error::domain("nothing to serialize: empty sequence list"));
    }
    Ok(out)
}

/// Parses an id list file. `expected` restricts the accepted header letters.
pub fn parse_id_lines(text: &str, expected: &[char]) -> Result<IdListFile> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "missing header line"))?;
    let (letter, value) = first
        .split_once('=')
        .ok_or_else(|| Error::parse(1, format!("malformed header {first:?}")))?;
    let header = match letter.trim() {
        s if s.chars().count() == 1 => s.chars().next().unwrap_or_default(),
        _ => return Err(Error::parse(1, format!("malformed header {first:?}"))),
    };
    if !expected.contains(&header) {
        return Err(Error::parse(
            1,
            format!("header {header:?} not one of {expected:?}"),
        ));
    }
    let size: u32 = value
        .trim()
        .parse()
        .map_err(|_| Error::parse(1, format!("header size {value:?} is not an integer")))?;
    if size == 0 {
        return Err(Error::domain("alphabet size in header must be positive"));
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno, "expected <utt_id>\\t<ids>"))?;
        let mut ids = Vec::new();
        for field in body.split_ascii_whitespace() {
            let v: u32 = field
                .parse()
                .map_err(|_| Error::parse(lineno, format!("{field:?} is not a non-negative integer")))?;
            if v >= size {
                return Err(Error::domain(format!(
                    "line {lineno}: id {v} is not below {header}={size}"
                )));
            }
            ids.push(v);
        }
        if ids.is_empty() {
            return Err(Error::parse(lineno, "sequence has no ids"));
        }
        rows.push((id.to_string(), ids));
    }
    Ok(IdListFile { header, size, rows })
}

pub fn read_id_file(path: impl AsRef<Path>, expected: &[char]) -> Result<IdListFile> {
    let text = fs::read_to_string(path)?;
    parse_id_lines(&text, expected)
}

pub fn read_token_file(path: impl AsRef<Path>) -> Result<Vec<TokenSequence>> {
    let file = read_id_file(path, &['K'])?;
    file.rows
        .into_iter()
        .map(|(id, toks)| TokenSequence::new(id, toks, file.size))
        .collect()
}

fn shared_size<T>(items: &[T], size: impl Fn(&T) -> u32, what: &str) -> Result<u32> {
    let first = items
        .first()
        .map(&size)
        .ok_or_else(|| Error::domain("nothing to serialize: empty sequence list"))?;
    if items.iter().any(|s| size(s) != first) {
        return Err(Error::domain(format!("{what} sequences have mixed alphabet sizes")));
    }
    Ok(first)
}

pub fn format_token_file(seqs: &[TokenSequence]) -> Result<String> {
    let k = shared_size(seqs, TokenSequence::alphabet_size, "token")?;
    format_id_lines('K', k, seqs.iter().map(|s| (s.utt_id(), s.tokens())))
}

pub fn write_token_file(seqs: &[TokenSequence], path: impl AsRef<Path>) -> Result<()> {
    let text = format_token_file(seqs)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_symbol_file(path: impl AsRef<Path>) -> Result<Vec<SymbolSequence>> {
    let file = read_id_file(path, &['P'])?;
    file.rows
        .into_iter()
        .map(|(id, syms)| SymbolSequence::new(id, syms, file.size))
        .collect()
}

pub fn write_symbol_file(seqs: &[SymbolSequence], path: impl AsRef<Path>) -> Result<()> {
    let p = shared_size(seqs, SymbolSequence::alphabet_size, "symbol")?;
    let text = format_id_lines('P', p, seqs.iter().map(|s| (s.utt_id(), s.symbols())))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn encode_feature_matrix(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let id = m.utt_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::domain("utterance id longer than 65535 bytes"))?;
    let rows = u32::try_from(m.rows).map_err(|_| Error::domain("too many rows"))?;
    let cols = u32::try_from(m.cols).map_err(|_| Error::domain("too many columns"))?;
    let mut out = Vec::with_capacity(22 + m.data.len() * 4 + id.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&m.frame_shift_ms.to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    Ok(out)
}

/// Little-endian cursor over a byte buffer with truncation errors.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(format!(
                    "truncated input: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_feature_matrix(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(FEATURE_MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let frame_shift_ms = r.f32()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("rows x cols overflows"))?;
    let data = r.f32_vec(n)?;
    let id_len = r.u16()? as usize;
    let id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| Error::format("utterance id is not valid UTF-8"))?
        .to_string();
    r.finish()?;
    FeatureMatrix::new(id, frame_shift_ms, rows, cols, data)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_feature_matrix(&fs::read(path)?)
}

pub fn write_feature_file(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_feature_matrix(m)?)?;
    Ok(())
}

/// Parameters of the synthetic paired corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub phoneme_alphabet: u32,
    pub token_alphabet: u32,
    pub runs_per_phoneme: u32,
    pub mean_run_length: f64,
    pub num_utterances: usize,
    /// Inclusive range of utterance lengths, in phonemes.
    pub utterance_length: (usize, usize),
    /// Motif lengths are drawn uniformly from `1..=max_motif_len`.
    pub max_motif_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            phoneme_alphabet: 40,
            token_alphabet: 256,
            runs_per_phoneme: 2,
            mean_run_length: 4.0,
            num_utterances: 2000,
            utterance_length: (8, 24),
            max_motif_len: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phoneme_alphabet < 2 || self.token_alphabet < 2 {
            return Err(Error::domain("phoneme and token alphabets need at least 2 entries"));
        }
        if self.runs_per_phoneme == 0 || self.num_utterances == 0 || self.max_motif_len == 0 {
            return Err(Error::domain("synth counts must be positive"));
        }
        if !(self.mean_run_length.is_finite() && self.mean_run_length >= 1.0) {
            return Err(Error::domain("mean_run_length must be at least 1"));
        }
        let (lo, hi) = self.utterance_length;
        if lo == 0 || lo > hi {
            return Err(Error::domain(format!(
                "utterance length range {lo}..={hi} is empty or starts at zero"
            )));
        }
        Ok(())
    }
}

/// Generates a paired (phoneme, token) corpus.
///
/// Every phoneme owns `runs_per_phoneme` motifs of base tokens. Each phoneme
/// occurrence picks one of its motifs and repeats it `1 + Geometric(1/mean)` times,
/// so the expected repeat count is `mean_run_length`. The result is a pure
/// function of the config.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Vec<SymbolSequence>, Vec<TokenSequence>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let motifs: Vec<Vec<Vec<u32>>> = (0..cfg.phoneme_alphabet)
        .map(|_| {
            (0..cfg.runs_per_phoneme)
                .map(|_| {
                    let len = rng.random_range(1..=cfg.max_motif_len);
                    (0..len)
                        .map(|_| rng.random_range(0..cfg.token_alphabet))
                        .collect()
                })
                .collect()
        })
        .collect();

    let geom = Geometric::new(1.0 / cfg.mean_run_length)
        .map_err(|e| Error::domain(format!("invalid run length distribution: {e}")))?;
    let (lo, hi) = cfg.utterance_length;

    let mut symbols = Vec::with_capacity(cfg.num_utterances);
    let mut tokens = Vec::with_capacity(cfg.num_utterances);
    for u in 0..cfg.num_utterances {
        let id = format!("synth-{u:05}");
        let len = rng.random_range(lo..=hi);
        let phones: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..cfg.phoneme_alphabet))
            .collect();
        let mut toks = Vec::new();
        for &p in &phones {
            let options = &motifs[p as usize];
            let motif = &options[rng.random_range(0..options.len())];
            let reps = 1 + geom.sample(&mut rng) as usize;
            for _ in 0..reps {
                toks.extend_from_slice(motif);
            }
        }
        symbols.push(SymbolSequence::new(id.clone(), phones, cfg.phoneme_alphabet)?);
        tokens.push(TokenSequence::new(id, toks, cfg.token_alphabet)?);
    }
    Ok((symbols, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_file_minimal_body() {
        let parsed = parse_id_lines("K=4\nu1\t0 1 2 3\n", &['K']).unwrap();
        assert_eq!(parsed.size, 4);
        assert_eq!(parsed.rows, vec![("u1".to_string(), vec![0, 1, 2, 3])]);
    }

    #[test]
    fn token_out_of_alphabet_is_domain_error() {
        let err = parse_id_lines("K=4\nu1\t0 9\n", &['K']).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn non_integer_field_reports_line() {
        let err = parse_id_lines("K=4\nu1\t0 1\nu2\t0 x\n", &['K']).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn blank_lines_are_skipped() {
        let parsed = parse_id_lines("K=2\n\nu1\t0\n\nu2\t1 1\n", &['K']).unwrap();
        assert_eq!(parsed.rows.len(), 2);
    }

    #[test]
    fn format_single_sequence() {
        let s = TokenSequence::new("u1", vec![0], 2).unwrap();
        assert_eq!(format_token_file(&[s]).unwrap(), "K=2\nu1\t0\n");
    }

    #[test]
    fn empty_list_cannot_be_written() {
        assert!(matches!(format_token_file(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn mixed_alphabets_rejected() {
        let a = TokenSequence::new("a", vec![0], 2).unwrap();
        let b = TokenSequence::new("b", vec![0], 3).unwrap();
        assert!(matches!(format_token_file(&[a, b]), Err(Error::Domain(_))));
    }

    #[test]
    fn wrong_header_letter_rejected() {
        assert!(parse_id_lines("P=4\nu\t1\n", &['K']).is_err());
    }

    #[test]
    fn feature_one_by_one_roundtrip() {
        let m = FeatureMatrix::new("x", 20.0, 1, 1, vec![0.0]).unwrap();
        let bytes = encode_feature_matrix(&m).unwrap();
        let back = decode_feature_matrix(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.data()[0].to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn feature_truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURE_MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&20f32.to_le_bytes());
        for i in 0..5 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let err = decode_feature_matrix(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("truncated")), "{err}");
    }

    #[test]
    fn feature_bad_magic() {
        let m = FeatureMatrix::new("x", 20.0, 1, 1, vec![1.0]).unwrap();
        let mut bytes = encode_feature_matrix(&m).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_feature_matrix(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn feature_non_finite_rejected() {
        let m = FeatureMatrix::new("x", 20.0, 1, 2, vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_feature_matrix(&m).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_feature_matrix(&bytes), Err(Error::Domain(_))));
        assert!(FeatureMatrix::new("x", 20.0, 1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn synth_minimal_config() {
        let cfg = SynthConfig {
            phoneme_alphabet: 2,
            token_alphabet: 4,
            runs_per_phoneme: 1,
            mean_run_length: 1.0,
            num_utterances: 1,
            utterance_length: (1, 1),
            max_motif_len: 2,
            seed: 3,
        };
        let (syms, toks) = synth_corpus(&cfg).unwrap();
        assert_eq!(syms.len(), 1);
        assert_eq!(syms[0].len(), 1);
        assert!(!toks[0].is_empty());
        assert!(toks[0].tokens().iter().all(|&t| t < 4));
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig {
            num_utterances: 50,
            ..SynthConfig::default()
        };
        assert_eq!(synth_corpus(&cfg).unwrap(), synth_corpus(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_corpus(&cfg).unwrap().1, synth_corpus(&other).unwrap().1);
    }

    #[test]
    fn synth_rejects_bad_config() {
        let cfg = SynthConfig {
            utterance_length: (5, 2),
            ..SynthConfig::default()
        };
        assert!(synth_corpus(&cfg).is_err());
        let cfg = SynthConfig {
            mean_run_length: 0.5,
            ..SynthConfig::default()
        };
        assert!(synth_corpus(&cfg).is_err());
    }
}
