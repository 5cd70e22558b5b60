//! End-to-end harnesses on the synthetic corpus: generation speed with and
//! without BPE, and prosody diversity of sampled outputs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;

use crate::bpe::{bpe_encode_corpus, decode_ids, BpeTrainer, BpeVocab};
use crate::corpus::{synth_corpus, SymbolSequence, SynthConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::lm::{lm_generate, lm_train, Decoder, LmConfig, LmParams, OptConfig, SamplingConfig, TrainingExample};
use crate::metrics::{ndb_js, prosody_frames, DiversityReport, NdbConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub vocab_size: u32,
    pub min_pair_freq: u64,
    /// Utterances used to train both language models.
    pub train_utterances: usize,
    /// Held-out utterances whose text drives generation.
    pub eval_utterances: usize,
    /// Shape shared by both models; vocabularies are filled in per stream.
    pub lm: LmConfig,
    pub opt: OptConfig,
    pub runs: usize,
    pub frame_shift_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            vocab_size: 20000,
            min_pair_freq: 2,
            train_utterances: 200,
            eval_utterances: 10,
            lm: LmConfig::new(1, 1),
            opt: OptConfig {
                epochs: 6,
                lr: 3e-3,
                batch_tokens: 1024,
                ..OptConfig::default()
            },
            runs: 5,
            frame_shift_ms: 20.0,
        }
    }
}

/// Both token streams and the models trained on them.
pub struct TrainedPair {
    pub vocab: BpeVocab,
    pub identity: BpeVocab,
    pub base_model: LmParams,
    pub bpe_model: LmParams,
    pub base_curve: Vec<f64>,
    pub bpe_curve: Vec<f64>,
    pub eval_text: Vec<SymbolSequence>,
    /// Reference lengths of the held-out utterances in base tokens and BPE ids.
    pub eval_base_len: Vec<usize>,
    pub eval_bpe_len: Vec<usize>,
    pub mean_compression: f64,
}

pub fn train_pair(cfg: &BenchConfig) -> Result<TrainedPair> {
    let (symbols, tokens) = synth_corpus(&cfg.synth)?;
    let needed = cfg.train_utterances + cfg.eval_utterances;
    if needed > tokens.len() || cfg.train_utterances == 0 || cfg.eval_utterances == 0 {
        return Err(Error::domain(format!(
            "need {needed} utterances with non-empty train and eval splits, corpus has {}",
            tokens.len()
        )));
    }
    let vocab = BpeTrainer::new(cfg.vocab_size)
        .min_pair_freq(cfg.min_pair_freq)
        .train(&tokens)?;
    let identity = BpeVocab::identity(cfg.synth.token_alphabet)?;
    let encoded = bpe_encode_corpus(&tokens, &vocab)?;
    let mean_compression = tokens
        .iter()
        .zip(&encoded)
        .map(|(t, e)| t.len() as f64 / e.len() as f64)
        .sum::<f64>()
        / tokens.len() as f64;

    let longest = tokens[..needed].iter().map(TokenSequence::len).max().unwrap_or(0)
        + symbols[..needed].iter().map(SymbolSequence::len).max().unwrap_or(0);
    let shape = |v: u32| LmConfig {
        text_vocab: cfg.synth.phoneme_alphabet,
        speech_vocab: v,
        max_len: cfg.lm.max_len.max(2 * longest + 16),
        ..cfg.lm.clone()
    };
    let base_examples: Vec<TrainingExample> = (0..cfg.train_utterances)
        .map(|i| TrainingExample::new(symbols[i].symbols().to_vec(), tokens[i].tokens().to_vec()))
        .collect();
    let bpe_examples: Vec<TrainingExample> = (0..cfg.train_utterances)
        .map(|i| TrainingExample::new(symbols[i].symbols().to_vec(), encoded[i].ids().to_vec()))
        .collect();
    let (base_model, base_curve) = lm_train(&base_examples, &shape(cfg.synth.token_alphabet), &cfg.opt)?;
    let (bpe_model, bpe_curve) = lm_train(&bpe_examples, &shape(vocab.vocab_size()), &cfg.opt)?;

    let eval = cfg.train_utterances..needed;
    Ok(TrainedPair {
        base_model,
        bpe_model,
        base_curve,
        bpe_curve,
        eval_text: symbols[eval.clone()].to_vec(),
        eval_base_len: tokens[eval.clone()].iter().map(TokenSequence::len).collect(),
        eval_bpe_len: encoded[eval].iter().map(|e| e.len()).collect(),
        vocab,
        identity,
        mean_compression,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtfReport {
    pub bpe_vocab_size: u32,
    pub mean_compression: f64,
    pub base_final_loss: f64,
    pub bpe_final_loss: f64,
    /// Per-run RTF over all held-out prompts.
    pub base_rtf: Vec<f64>,
    pub bpe_rtf: Vec<f64>,
    pub speedups: Vec<f64>,
    pub median_speedup: f64,
    /// Generated ids and the base tokens they stand for, per stream, from the last run.
    pub base_generated: (usize, usize),
    pub bpe_generated: (usize, usize),
}

impl RtfReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bpe vocab {}  mean compression {:.3}", self.bpe_vocab_size, self.mean_compression);
        let _ = writeln!(out, "final loss  base {:.4}  bpe {:.4}", self.base_final_loss, self.bpe_final_loss);
        let _ = writeln!(out, "run   base_rtf    bpe_rtf  speedup");
        for (i, ((b, p), s)) in self.base_rtf.iter().zip(&self.bpe_rtf).zip(&self.speedups).enumerate() {
            let _ = writeln!(out, "{:>3} {:>10.6} {:>10.6} {:>8.3}", i + 1, b, p, s);
        }
        let _ = writeln!(
            out,
            "generated  base {} ids / {} tokens  bpe {} ids / {} tokens",
            self.base_generated.0, self.base_generated.1, self.bpe_generated.0, self.bpe_generated.1
        );
        let _ = writeln!(out, "speedup {:.3}", self.median_speedup);
        out
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Greedy decoding with EOS masked until the decoded output covers `target`
/// base tokens, so both streams synthesize the same duration. Returns
/// (loop wall time, ids emitted, base tokens).
fn fixed_duration_pass(model: &LmParams, vocab: &BpeVocab, text: &[u32], target: usize) -> Result<(f64, usize, usize)> {
    let eos = model.config().eos_id() as usize;
    let mut dec = Decoder::new(model);
    let mut logits = dec.prefill(text, &[])?;
    let start = Instant::now();
    let (mut ids, mut base) = (0usize, 0usize);
    while base < target && dec.len() < model.config().max_len {
        logits[eos] = f32::NEG_INFINITY;
        let next = argmax(&logits);
        ids += 1;
        base += vocab
            .expansion(next as u32)
            .map(<[u32]>::len)
            .ok_or_else(|| Error::domain(format!("generated id {next} outside vocabulary")))?;
        logits = dec.push_speech(next as u32, ids);
    }
    Ok((start.elapsed().as_secs_f64(), ids, base))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn timed_pass(model: &LmParams, vocab: &BpeVocab, pair: &TrainedPair) -> Result<(f64, usize, usize)> {
    let (mut wall, mut ids, mut base) = (0.0, 0, 0);
    for (x, &len) in pair.eval_text.iter().zip(&pair.eval_base_len) {
        let (w, i, b) = fixed_duration_pass(model, vocab, x.symbols(), len)?;
        wall += w;
        ids += i;
        base += b;
    }
    Ok((wall, ids, base))
}

pub fn rtf_on_pair(pair: &TrainedPair, cfg: &BenchConfig) -> Result<RtfReport> {
    if cfg.runs == 0 {
        return Err(Error::domain("runs must be at least 1"));
    }
    let duration = |base: usize| base as f64 * cfg.frame_shift_ms / 1000.0;
    let (mut base_rtf, mut bpe_rtf, mut speedups) = (Vec::new(), Vec::new(), Vec::new());
    let (mut base_generated, mut bpe_generated) = ((0, 0), (0, 0));
    for _ in 0..cfg.runs {
        let (w, i, b) = timed_pass(&pair.base_model, &pair.identity, pair)?;
        let (pw, pi, pb) = timed_pass(&pair.bpe_model, &pair.vocab, pair)?;
        if b == 0 || pb == 0 {
            return Err(Error::domain("a model generated no speech; RTF is undefined"));
        }
        let (r0, r1) = (w / duration(b), pw / duration(pb));
        base_rtf.push(r0);
        bpe_rtf.push(r1);
        speedups.push(r0 / r1);
        base_generated = (i, b);
        bpe_generated = (pi, pb);
    }
    Ok(RtfReport {
        bpe_vocab_size: pair.vocab.vocab_size(),
        mean_compression: pair.mean_compression,
        base_final_loss: pair.base_curve.last().copied().unwrap_or(f64::NAN),
        bpe_final_loss: pair.bpe_curve.last().copied().unwrap_or(f64::NAN),
        median_speedup: median(&speedups),
        base_rtf,
        bpe_rtf,
        speedups,
        base_generated,
        bpe_generated,
    })
}

/// Trains both models, then times equal-duration greedy generation `cfg.runs` times.
pub fn bench_rtf(cfg: &BenchConfig) -> Result<RtfReport> {
    let pair = train_pair(cfg)?;
    rtf_on_pair(&pair, cfg)
}

pub const RENDER_SAMPLE_RATE: u32 = 16000;

/// Renders base tokens as a tone sequence: each token holds a fixed pitch and
/// amplitude for one frame shift. Phase is continuous across tokens.
pub fn render_tokens(tokens: &[u32], frame_shift_ms: f64) -> Vec<f32> {
    let per = (RENDER_SAMPLE_RATE as f64 * frame_shift_ms / 1000.0).round() as usize;
    let mut out = Vec::with_capacity(tokens.len() * per);
    let mut phase = 0f64;
    for &t in tokens {
        let pitch = 80.0 + ((t as u64 * 37) % 241) as f64;
        let amp = 0.1 + 0.8 * ((t as u64 * 53) % 101) as f64 / 100.0;
        let step = 2.0 * std::f64::consts::PI * pitch / RENDER_SAMPLE_RATE as f64;
        for _ in 0..per {
            out.push((amp * phase.sin()) as f32);
            phase = (phase + step) % (2.0 * std::f64::consts::PI);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityComparison {
    pub base: DiversityReport,
    pub bpe: DiversityReport,
}

/// Samples every held-out text `samples_per_text` times from each model,
/// renders the outputs, and measures NDB/JS between two halves of the
/// resulting prosody frames. The halves split utterances at random per model.
pub fn diversity_on_pair(
    pair: &TrainedPair,
    cfg: &BenchConfig,
    sampling: &SamplingConfig,
    samples_per_text: usize,
    ndb: &NdbConfig,
) -> Result<DiversityComparison> {
    let collect = |model: &LmParams, vocab: &BpeVocab, ref_len: &[usize]| -> Result<DiversityReport> {
        let mut utterances: Vec<Vec<f32>> = Vec::new();
        for (ti, (x, &len)) in pair.eval_text.iter().zip(ref_len).enumerate() {
            for r in 0..samples_per_text {
                let sc = SamplingConfig {
                    seed: sampling.seed.wrapping_add((ti * samples_per_text + r) as u64),
                    max_new: 2 * len + 8,
                    ..sampling.clone()
                };
                let res = lm_generate(model, &[], x.symbols(), &[], &sc)?;
                let tokens = decode_ids(&res.ids, vocab)?;
                let wave = render_tokens(&tokens, cfg.frame_shift_ms);
                if wave.len() < (RENDER_SAMPLE_RATE as usize * 25 / 1000) {
                    continue;
                }
                let frames = prosody_frames(&wave, RENDER_SAMPLE_RATE, 25.0, 10.0)?;
                utterances.push(
                    frames
                        .iter()
                        .flat_map(|f| [f.pitch as f32, f.pov as f32, f.energy as f32])
                        .collect(),
                );
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ndb.seed);
        utterances.shuffle(&mut rng);
        let half = utterances.len() / 2;
        let a: Vec<f32> = utterances[..half].concat();
        let b: Vec<f32> = utterances[half..].concat();
        ndb_js(&a, &b, 3, ndb)
    };
    Ok(DiversityComparison {
        base: collect(&pair.base_model, &pair.identity, &pair.eval_base_len)?,
        bpe: collect(&pair.bpe_model, &pair.vocab, &pair.eval_bpe_len)?,
    })
}
