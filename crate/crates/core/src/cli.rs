//! Command line front end. Every subcommand accepts `--config`, `--set`,
//! `--seed` and `--threads`, and writes `<primary output>.manifest.json`
//! next to its main artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{rtf_on_pair, train_pair, BenchConfig};
use crate::bpe::{
    bpe_decode, bpe_encode_corpus, compression_stats, format_bpe_file, read_bpe_file,
    write_codepoint_export, BpeSequence, BpeTrainer, BpeVocab, DEFAULT_CODEPOINT_OFFSET,
};
use crate::corpus::{
    format_id_lines, format_token_file, read_feature_file, read_symbol_file, read_token_file,
    synth_corpus, write_symbol_file, FeatureMatrix, SynthConfig, TokenSequence,
};
use crate::error::{Error, Result};
use crate::lm::{
    format_loss_curve, lm_generate, lm_train, LmConfig, LmParams, OptConfig, SamplingConfig,
    TrainingExample,
};
use crate::metrics::{mcd_dtw, ndb_js, wer, NdbConfig, WerResult};
use crate::quantizer::{kmeans_assign, kmeans_train, Codebook, KmeansConfig, KmeansInit};

#[derive(Parser, Debug)]
#[command(name = "abpe", version, about = "Acoustic BPE pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` file with namespaced keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired phoneme/token corpus.
    SynthCorpus {
        #[arg(long)]
        out_tokens: PathBuf,
        #[arg(long)]
        out_symbols: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a k-means codebook on feature files.
    QuantizeTrain {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Assign feature frames to their nearest centroids.
    QuantizeEncode {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Learn a merge list from a token file.
    BpeTrain {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_size: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Encode a token file into BPE ids.
    BpeEncode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the base tokens as one codepoint string per line.
        #[arg(long)]
        export_codepoints: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Expand BPE ids back into base tokens.
    BpeDecode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-utterance compression ratios.
    BpeStats {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the conditional token model.
    LmTrain {
        #[arg(long)]
        symbols: PathBuf,
        /// Token (`K=`) or BPE (`V=`) file, paired with `--symbols` line by line.
        #[arg(long)]
        speech: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate speech ids for every text in a symbol file.
    LmGenerate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        symbols: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Text prompts matched to `--symbols` by utterance id.
        #[arg(long)]
        prompt_symbols: Option<PathBuf>,
        /// Speech prompts matched to `--symbols` by utterance id.
        #[arg(long)]
        prompt_speech: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Word error rate between `utt_id<TAB>words` files.
    EvalWer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// MCD with DTW between paired feature files.
    EvalMcd {
        #[arg(long = "ref", num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        hyp: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// NDB and JS divergence between two pools of feature frames.
    EvalNdbJs {
        #[arg(long, num_args = 1.., required = true)]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        b: Vec<PathBuf>,
        /// Output of eval-wer; with `metrics.wer_cutoff`, drops utterances above the cutoff.
        #[arg(long)]
        wer_csv: Option<PathBuf>,
        /// Defaults to `ndb_js.csv` in the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time equal-duration generation with and without BPE on the synthetic corpus.
    BenchRtf {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rerun a command from its manifest and check the output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthCorpus { common, .. }
            | Command::QuantizeTrain { common, .. }
            | Command::QuantizeEncode { common, .. }
            | Command::BpeTrain { common, .. }
            | Command::BpeEncode { common, .. }
            | Command::BpeDecode { common, .. }
            | Command::BpeStats { common, .. }
            | Command::LmTrain { common, .. }
            | Command::LmGenerate { common, .. }
            | Command::EvalWer { common, .. }
            | Command::EvalMcd { common, .. }
            | Command::EvalNdbJs { common, .. }
            | Command::BenchRtf { common, .. }
            | Command::Replay { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::SynthCorpus { .. } => "synth-corpus",
            Command::QuantizeTrain { .. } => "quantize-train",
            Command::QuantizeEncode { .. } => "quantize-encode",
            Command::BpeTrain { .. } => "bpe-train",
            Command::BpeEncode { .. } => "bpe-encode",
            Command::BpeDecode { .. } => "bpe-decode",
            Command::BpeStats { .. } => "bpe-stats",
            Command::LmTrain { .. } => "lm-train",
            Command::LmGenerate { .. } => "lm-generate",
            Command::EvalWer { .. } => "eval-wer",
            Command::EvalMcd { .. } => "eval-mcd",
            Command::EvalNdbJs { .. } => "eval-ndb-js",
            Command::BenchRtf { .. } => "bench-rtf",
            Command::Replay { .. } => "replay",
        }
    }

    /// Module named in error messages.
    fn module(&self) -> &'static str {
        match self {
            Command::SynthCorpus { .. } => "corpus",
            Command::QuantizeTrain { .. } | Command::QuantizeEncode { .. } => "quantizer",
            Command::BpeTrain { .. }
            | Command::BpeEncode { .. }
            | Command::BpeDecode { .. }
            | Command::BpeStats { .. } => "abpe",
            Command::LmTrain { .. } | Command::LmGenerate { .. } | Command::BenchRtf { .. } => "lm",
            Command::EvalWer { .. } | Command::EvalMcd { .. } | Command::EvalNdbJs { .. } => "metrics",
            Command::Replay { .. } => "cli",
        }
    }
}

/// Layered `key = value` settings: defaults < config file < `--set` < dedicated flags.
struct Settings {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
    effective: BTreeMap<String, String>,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got {line:?}")))?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self {
            values,
            used: BTreeSet::new(),
            effective: BTreeMap::new(),
        })
    }

    fn get<T>(&mut self, key: &str, default: T, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
    {
        self.used.insert(key.to_string());
        let value = match (flag, self.values.get(key)) {
            (Some(v), _) => v,
            (None, Some(raw)) => raw
                .parse()
                .map_err(|_| Error::Usage(format!("invalid value {raw:?} for {key}")))?,
            (None, None) => default,
        };
        self.effective.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn finish(&self) -> Result<BTreeMap<String, String>> {
        if let Some(unknown) = self.values.keys().find(|k| !self.used.contains(*k)) {
            return Err(Error::Usage(format!("unknown config key {unknown:?} for this command")));
        }
        Ok(self.effective.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name; rerunning them reproduces the outputs.
    pub argv: Vec<String>,
    pub inputs: Vec<FileHash>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub threads: usize,
    pub outputs: Vec<FileHash>,
    /// Wall-clock measurements; the only fields that vary between reruns.
    pub timing: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// What a command produced, before hashing.
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timing: BTreeMap<String, serde_json::Value>,
    /// Lines for stdout.
    report: String,
}

impl Outcome {
    fn new(inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, report: String) -> Self {
        Self {
            inputs,
            outputs,
            timing: BTreeMap::new(),
            report,
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn synth_settings(s: &mut Settings, seed: u64) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        phoneme_alphabet: s.get("corpus.phoneme_alphabet", d.phoneme_alphabet, None)?,
        token_alphabet: s.get("corpus.token_alphabet", d.token_alphabet, None)?,
        runs_per_phoneme: s.get("corpus.runs_per_phoneme", d.runs_per_phoneme, None)?,
        mean_run_length: s.get("corpus.mean_run_length", d.mean_run_length, None)?,
        num_utterances: s.get("corpus.num_utterances", d.num_utterances, None)?,
        utterance_length: (
            s.get("corpus.min_length", d.utterance_length.0, None)?,
            s.get("corpus.max_length", d.utterance_length.1, None)?,
        ),
        max_motif_len: s.get("corpus.max_motif_len", d.max_motif_len, None)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn lm_shape_settings(s: &mut Settings, text_vocab: u32, speech_vocab: u32, seed: u64) -> Result<LmConfig> {
    let d = LmConfig::new(text_vocab, speech_vocab);
    Ok(LmConfig {
        dim: s.get("lm.dim", d.dim, None)?,
        layers: s.get("lm.layers", d.layers, None)?,
        heads: s.get("lm.heads", d.heads, None)?,
        ff_mult: s.get("lm.ff_mult", d.ff_mult, None)?,
        max_len: s.get("lm.max_len", d.max_len, None)?,
        dropout: s.get("lm.dropout", d.dropout, None)?,
        seed,
        ..d
    })
}

fn opt_settings(s: &mut Settings, d: OptConfig) -> Result<OptConfig> {
    Ok(OptConfig {
        lr: s.get("lm.lr", d.lr, None)?,
        betas: (s.get("lm.beta1", d.betas.0, None)?, s.get("lm.beta2", d.betas.1, None)?),
        eps: s.get("lm.eps", d.eps, None)?,
        weight_decay: s.get("lm.weight_decay", d.weight_decay, None)?,
        epochs: s.get("lm.epochs", d.epochs, None)?,
        batch_tokens: s.get("lm.batch_tokens", d.batch_tokens, None)?,
        grad_accum: s.get("lm.grad_accum", d.grad_accum, None)?,
    })
}

fn read_features(paths: &[PathBuf]) -> Result<Vec<FeatureMatrix>> {
    paths.iter().map(read_feature_file).collect()
}

/// `utt_id<TAB>word word ...` lines; a line without a tab is an utterance with no words.
fn read_word_file(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').unwrap_or((line, ""));
        rows.push((id.to_string(), body.split_whitespace().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn run_command(cmd: &Command, argv: &[String]) -> Result<Outcome> {
    let common = cmd.common();
    let seed = common.seed.unwrap_or(0);
    let mut s = Settings::load(common)?;
    let (outcome, config) = match cmd {
        Command::SynthCorpus {
            out_tokens,
            out_symbols,
            ..
        } => {
            let cfg = synth_settings(&mut s, seed)?;
            let config = s.finish()?;
            let (symbols, tokens) = synth_corpus(&cfg)?;
            write(out_tokens, format_token_file(&tokens)?)?;
            write_symbol_file(&symbols, out_symbols)?;
            let report = format!(
                "{} utterances, {} tokens",
                tokens.len(),
                tokens.iter().map(TokenSequence::len).sum::<usize>()
            );
            (Outcome::new(vec![], vec![out_tokens.clone(), out_symbols.clone()], report), config)
        }
        Command::QuantizeTrain { inputs, out, k, .. } => {
            let d = KmeansConfig::new(256);
            let cfg = KmeansConfig {
                k: s.get("quantizer.k", d.k, *k)?,
                max_iters: s.get("quantizer.max_iters", d.max_iters, None)?,
                rel_tol: s.get("quantizer.rel_tol", d.rel_tol, None)?,
                init: s.get("quantizer.init", KmeansInit::KmeansPlusPlus, None)?,
                seed,
            };
            let config = s.finish()?;
            let frames = read_features(inputs)?;
            let cb = kmeans_train(&frames, &cfg)?;
            cb.save(out)?;
            let report = format!("k {} d {} inertia {}", cb.k(), cb.d(), cb.training_inertia());
            (Outcome::new(inputs.clone(), vec![out.clone()], report), config)
        }
        Command::QuantizeEncode {
            codebook,
            inputs,
            out,
            ..
        } => {
            let config = s.finish()?;
            let cb = Codebook::load(codebook)?;
            let seqs = read_features(inputs)?
                .iter()
                .map(|m| kmeans_assign(m, &cb))
                .collect::<Result<Vec<_>>>()?;
            write(out, format_token_file(&seqs)?)?;
            let mut ins = vec![codebook.clone()];
            ins.extend(inputs.iter().cloned());
            (Outcome::new(ins, vec![out.clone()], format!("{} utterances encoded", seqs.len())), config)
        }
        Command::BpeTrain {
            input,
            out,
            vocab_size,
            ..
        } => {
            let target = s.get("abpe.vocab_size", 5000u32, *vocab_size)?;
            let min_freq = s.get("abpe.min_pair_freq", 2u64, None)?;
            let offset = s.get("abpe.offset", DEFAULT_CODEPOINT_OFFSET, None)?;
            let config = s.finish()?;
            let corpus = read_token_file(input)?;
            let (vocab, freqs) = BpeTrainer::new(target)
                .min_pair_freq(min_freq)
                .offset(offset)
                .train_with_frequencies(&corpus)?;
            vocab.save(out)?;
            let mut report = format!("vocab {} ({} merges)", vocab.vocab_size(), vocab.merges().len());
            if (vocab.vocab_size()) < target {
                report.push_str(&format!(
                    "; stopped early, last merge frequency {}",
                    freqs.last().copied().unwrap_or(0)
                ));
            }
            (Outcome::new(vec![input.clone()], vec![out.clone()], report), config)
        }
        Command::BpeEncode {
            vocab,
            input,
            out,
            export_codepoints,
            ..
        } => {
            let config = s.finish()?;
            let v = BpeVocab::load(vocab)?;
            let corpus = read_token_file(input)?;
            let encoded = bpe_encode_corpus(&corpus, &v)?;
            write(out, format_bpe_file(&encoded)?)?;
            let mut outputs = vec![out.clone()];
            if let Some(cp) = export_codepoints {
                write_codepoint_export(&corpus, v.offset(), cp)?;
                outputs.push(cp.clone());
            }
            let report = format!(
                "{} utterances, {} ids",
                encoded.len(),
                encoded.iter().map(BpeSequence::len).sum::<usize>()
            );
            (Outcome::new(vec![vocab.clone(), input.clone()], outputs, report), config)
        }
        Command::BpeDecode {
            vocab, input, out, ..
        } => {
            let config = s.finish()?;
            let v = BpeVocab::load(vocab)?;
            let decoded = read_bpe_file(input)?
                .iter()
                .map(|seq| bpe_decode(seq, &v))
                .collect::<Result<Vec<_>>>()?;
            write(out, format_token_file(&decoded)?)?;
            let report = format!("{} utterances decoded", decoded.len());
            (Outcome::new(vec![vocab.clone(), input.clone()], vec![out.clone()], report), config)
        }
        Command::BpeStats {
            vocab, input, out, ..
        } => {
            let config = s.finish()?;
            let v = BpeVocab::load(vocab)?;
            let corpus = read_token_file(input)?;
            let stats = compression_stats(&corpus, &v)?;
            let mut csv = String::from("utt_id,base_tokens,ratio\n");
            for (seq, r) in corpus.iter().zip(&stats.per_utt) {
                csv.push_str(&format!("{},{},{r}\n", seq.utt_id(), seq.len()));
            }
            csv.push_str(&format!(
                "total,{},{}\n",
                stats.total_base_tokens,
                stats.total_base_tokens as f64 / stats.total_bpe_ids as f64
            ));
            write(out, csv)?;
            let report = format!(
                "mean ratio {:.4}, {} base tokens -> {} ids",
                stats.mean_ratio, stats.total_base_tokens, stats.total_bpe_ids
            );
            (Outcome::new(vec![vocab.clone(), input.clone()], vec![out.clone()], report), config)
        }
        Command::LmTrain {
            symbols,
            speech,
            out,
            loss_curve,
            ..
        } => {
            let text = read_symbol_file(symbols)?;
            let sp = read_bpe_file(speech)?;
            if text.len() != sp.len() {
                return Err(Error::domain(format!(
                    "{} symbol rows but {} speech rows",
                    text.len(),
                    sp.len()
                )));
            }
            let mut examples = Vec::with_capacity(text.len());
            for (x, y) in text.iter().zip(&sp) {
                if x.utt_id() != y.utt_id() {
                    return Err(Error::domain(format!(
                        "utterance ids differ: {} vs {}",
                        x.utt_id(),
                        y.utt_id()
                    )));
                }
                examples.push(TrainingExample::new(x.symbols().to_vec(), y.ids().to_vec()));
            }
            let p = text.first().map_or(1, |x| x.alphabet_size());
            let v = sp.first().map_or(1, |y| y.vocab_size());
            let cfg = lm_shape_settings(&mut s, p, v, seed)?;
            let opt = opt_settings(&mut s, OptConfig::default())?;
            let config = s.finish()?;
            let start = Instant::now();
            let (params, curve) = lm_train(&examples, &cfg, &opt)?;
            let train_s = start.elapsed().as_secs_f64();
            params.save(out)?;
            let curve_path = loss_curve.clone().unwrap_or_else(|| {
                let mut s = out.as_os_str().to_owned();
                s.push(".loss.csv");
                PathBuf::from(s)
            });
            write(&curve_path, format_loss_curve(&curve))?;
            let report = format!(
                "{} parameters, final loss {}",
                params.num_params(),
                curve.last().map_or("n/a".to_string(), |l| format!("{l:.5}"))
            );
            let mut o = Outcome::new(vec![symbols.clone(), speech.clone()], vec![out.clone(), curve_path], report);
            o.timing.insert("train_s".into(), train_s.into());
            (o, config)
        }
        Command::LmGenerate {
            model,
            symbols,
            out,
            prompt_symbols,
            prompt_speech,
            ..
        } => {
            let d = SamplingConfig::default();
            let greedy = s.get("lm.greedy", false, None)?;
            let base = SamplingConfig {
                temperature: s.get("lm.temperature", d.temperature, None)?,
                top_k: s.get("lm.top_k", d.top_k, None)?,
                top_p: s.get("lm.top_p", d.top_p, None)?,
                max_new: s.get("lm.max_new", d.max_new, None)?,
                seed,
                greedy,
            };
            let config = s.finish()?;
            let params = LmParams::load(model)?;
            let texts = read_symbol_file(symbols)?;
            let mut inputs = vec![model.clone(), symbols.clone()];
            let by_id = |rows: Vec<(String, Vec<u32>)>| rows.into_iter().collect::<BTreeMap<_, _>>();
            let xp = match prompt_symbols {
                Some(path) => {
                    inputs.push(path.clone());
                    by_id(read_symbol_file(path)?.into_iter().map(|x| (x.utt_id().to_string(), x.symbols().to_vec())).collect())
                }
                None => BTreeMap::new(),
            };
            let spk = match prompt_speech {
                Some(path) => {
                    inputs.push(path.clone());
                    by_id(read_bpe_file(path)?.into_iter().map(|y| (y.utt_id().to_string(), y.ids().to_vec())).collect())
                }
                None => BTreeMap::new(),
            };
            let mut rows = Vec::new();
            let mut wall = 0.0;
            let mut empty = 0usize;
            for (i, x) in texts.iter().enumerate() {
                let sc = SamplingConfig {
                    seed: seed.wrapping_add(i as u64),
                    ..base.clone()
                };
                let no_prompt = Vec::new();
                let res = lm_generate(
                    &params,
                    xp.get(x.utt_id()).unwrap_or(&no_prompt),
                    x.symbols(),
                    spk.get(x.utt_id()).unwrap_or(&no_prompt),
                    &sc,
                )?;
                wall += res.wall_time_s;
                if res.ids.is_empty() {
                    empty += 1;
                } else {
                    rows.push((x.utt_id().to_string(), res.ids));
                }
            }
            if rows.is_empty() {
                return Err(Error::domain("every generation ended immediately with EOS"));
            }
            write(
                out,
                format_id_lines(
                    'V',
                    params.config().speech_vocab,
                    rows.iter().map(|(id, ids)| (id.as_str(), ids.as_slice())),
                )?,
            )?;
            let mut report = format!(
                "{} utterances, {} ids",
                rows.len(),
                rows.iter().map(|r| r.1.len()).sum::<usize>()
            );
            if empty > 0 {
                report.push_str(&format!("; {empty} empty generations omitted"));
            }
            let mut o = Outcome::new(inputs, vec![out.clone()], report);
            o.timing.insert("generation_s".into(), wall.into());
            (o, config)
        }
        Command::EvalWer {
            reference, hyp, out, ..
        } => {
            let config = s.finish()?;
            let refs = read_word_file(reference)?;
            let hyps: BTreeMap<_, _> = read_word_file(hyp)?.into_iter().collect();
            let mut csv = String::from("utt_id,ref_words,substitutions,deletions,insertions,wer\n");
            let (mut words, mut errors) = (0usize, 0usize);
            for (id, r) in &refs {
                let h = hyps
                    .get(id)
                    .ok_or_else(|| Error::domain(format!("no hypothesis for utterance {id}")))?;
                let WerResult {
                    rate,
                    substitutions,
                    deletions,
                    insertions,
                } = wer(r, h)?;
                words += r.len();
                errors += substitutions + deletions + insertions;
                csv.push_str(&format!(
                    "{id},{},{substitutions},{deletions},{insertions},{rate}\n",
                    r.len()
                ));
            }
            if words == 0 {
                return Err(Error::domain("reference file holds no words"));
            }
            let total = errors as f64 / words as f64;
            csv.push_str(&format!("total,{words},,,,{total}\n"));
            write(out, csv)?;
            (
                Outcome::new(vec![reference.clone(), hyp.clone()], vec![out.clone()], format!("WER {total:.4}")),
                config,
            )
        }
        Command::EvalMcd {
            reference, hyp, out, ..
        } => {
            let config = s.finish()?;
            if reference.len() != hyp.len() {
                return Err(Error::domain("--ref and --hyp need the same number of files"));
            }
            let mut csv = String::from("ref,hyp,mcd\n");
            let mut sum = 0.0;
            for (r, h) in reference.iter().zip(hyp) {
                let v = mcd_dtw(&read_feature_file(r)?, &read_feature_file(h)?)?;
                sum += v;
                csv.push_str(&format!("{},{},{v}\n", r.display(), h.display()));
            }
            let mean = sum / reference.len() as f64;
            csv.push_str(&format!("mean,,{mean}\n"));
            write(out, csv)?;
            let mut ins = reference.clone();
            ins.extend(hyp.iter().cloned());
            (Outcome::new(ins, vec![out.clone()], format!("MCD {mean:.4}")), config)
        }
        Command::EvalNdbJs {
            a, b, wer_csv, out, ..
        } => {
            let d = NdbConfig::default();
            let cfg = NdbConfig {
                k_bins: s.get("metrics.k_bins", d.k_bins, None)?,
                alpha: s.get("metrics.alpha", d.alpha, None)?,
                repeats: s.get("metrics.repeats", d.repeats, None)?,
                seed,
            };
            let cutoff: Option<f64> = match s.values.contains_key("metrics.wer_cutoff") {
                true => Some(s.get("metrics.wer_cutoff", f64::INFINITY, None)?),
                false => None,
            };
            let config = s.finish()?;
            let mut inputs: Vec<PathBuf> = a.iter().chain(b).cloned().collect();
            let keep: Option<BTreeSet<String>> = match (wer_csv, cutoff) {
                (Some(path), Some(c)) => {
                    inputs.push(path.clone());
                    Some(low_wer_ids(path, c)?)
                }
                (None, Some(_)) => return Err(Error::Usage("metrics.wer_cutoff needs --wer-csv".into())),
                _ => None,
            };
            let pool = |paths: &[PathBuf]| -> Result<(Vec<f32>, usize)> {
                let mut data = Vec::new();
                let mut dim = None;
                for m in read_features(paths)? {
                    if keep.as_ref().is_some_and(|k| !k.contains(m.utt_id())) {
                        continue;
                    }
                    if *dim.get_or_insert(m.cols()) != m.cols() {
                        return Err(Error::domain("feature files have different dimensions"));
                    }
                    data.extend_from_slice(m.data());
                }
                let dim = dim.ok_or_else(|| Error::domain("no feature frames left after filtering"))?;
                Ok((data, dim))
            };
            let (pa, da) = pool(a)?;
            let (pb, db) = pool(b)?;
            if da != db {
                return Err(Error::domain("the two sample sets have different dimensions"));
            }
            let rep = ndb_js(&pa, &pb, da, &cfg)?;
            let out = out.clone().unwrap_or_else(|| PathBuf::from("ndb_js.csv"));
            write(&out, rep.to_csv())?;
            let report = format!("{}NDB {:.3}, JS {:.3}", rep.to_table(), rep.ndb, rep.js);
            (Outcome::new(inputs, vec![out], report), config)
        }
        Command::BenchRtf { out, .. } => {
            let d = BenchConfig::default();
            let synth = synth_settings(&mut s, seed)?;
            let lm = lm_shape_settings(&mut s, 1, 1, seed)?;
            let opt = opt_settings(&mut s, d.opt.clone())?;
            let cfg = BenchConfig {
                synth,
                vocab_size: s.get("abpe.vocab_size", d.vocab_size, None)?,
                min_pair_freq: s.get("abpe.min_pair_freq", d.min_pair_freq, None)?,
                train_utterances: s.get("lm.train_utterances", d.train_utterances, None)?,
                eval_utterances: s.get("lm.eval_utterances", d.eval_utterances, None)?,
                lm,
                opt,
                runs: s.get("lm.bench_runs", d.runs, None)?,
                frame_shift_ms: s.get("corpus.frame_shift_ms", d.frame_shift_ms, None)?,
            };
            let config = s.finish()?;
            let pair = train_pair(&cfg)?;
            let rep = rtf_on_pair(&pair, &cfg)?;
            let deterministic = serde_json::json!({
                "bpe_vocab_size": rep.bpe_vocab_size,
                "mean_compression": rep.mean_compression,
                "base_loss_curve": pair.base_curve,
                "bpe_loss_curve": pair.bpe_curve,
                "base_generated_ids": rep.base_generated.0,
                "base_generated_tokens": rep.base_generated.1,
                "bpe_generated_ids": rep.bpe_generated.0,
                "bpe_generated_tokens": rep.bpe_generated.1,
            });
            write(out, serde_json::to_string_pretty(&deterministic).map_err(|e| Error::format(e.to_string()))? + "\n")?;
            let mut o = Outcome::new(vec![], vec![out.clone()], rep.to_table());
            o.timing.insert("base_rtf".into(), rep.base_rtf.clone().into());
            o.timing.insert("bpe_rtf".into(), rep.bpe_rtf.clone().into());
            o.timing.insert("speedups".into(), rep.speedups.clone().into());
            o.timing.insert("median_speedup".into(), rep.median_speedup.into());
            (o, config)
        }
        Command::Replay { manifest, .. } => {
            let config = s.finish()?;
            let m = read_manifest(manifest)?;
            if m.command == "replay" {
                return Err(Error::Usage("a replay manifest cannot be replayed".into()));
            }
            for input in &m.inputs {
                if sha256_file(&input.path)? != input.sha256 {
                    return Err(Error::domain(format!("input {} changed since the recorded run", input.path)));
                }
            }
            let mut args = vec!["abpe".to_string()];
            args.extend(m.argv.iter().cloned());
            execute(&args).map_err(|e| e.error)?;
            let mut mismatched = Vec::new();
            for output in &m.outputs {
                if sha256_file(&output.path)? != output.sha256 {
                    mismatched.push(output.path.clone());
                }
            }
            if !mismatched.is_empty() {
                return Err(Error::domain(format!("outputs differ from manifest: {}", mismatched.join(", "))));
            }
            let _ = config;
            let report = format!("replayed {}: {} outputs identical", m.command, m.outputs.len());
            return Ok(Outcome::new(vec![manifest.clone()], vec![], report));
        }
    };
    write_manifest(cmd, argv, &outcome, config)?;
    Ok(outcome)
}

fn low_wer_ids(path: &Path, cutoff: f64) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path)?;
    let mut keep = BTreeSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::parse(i + 1, "expected 6 comma-separated fields"));
        }
        if fields[0] == "total" {
            continue;
        }
        let rate: f64 = fields[5]
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad WER value {:?}", fields[5])))?;
        if rate <= cutoff {
            keep.insert(fields[0].to_string());
        }
    }
    Ok(keep)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))
}

fn write_manifest(
    cmd: &Command,
    argv: &[String],
    outcome: &Outcome,
    config: BTreeMap<String, String>,
) -> Result<()> {
    let common = cmd.common();
    let primary = outcome
        .outputs
        .first()
        .ok_or_else(|| Error::domain("command produced no outputs"))?;
    let manifest = Manifest {
        tool: "abpe".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.name().into(),
        argv: argv.to_vec(),
        inputs: hashes(&outcome.inputs)?,
        config,
        seed: common.seed.unwrap_or(0),
        threads: rayon::current_num_threads(),
        outputs: hashes(&outcome.outputs)?,
        timing: outcome.timing.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
    write(&manifest_path(primary), text + "\n")
}

/// A failure tagged with the module that raised it.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub error: Error,
}

impl CliError {
    /// `error[<category>] <module>: <message>` on one line.
    pub fn line(&self) -> String {
        let msg = self.error.to_string().replace('\n', " ");
        format!("error[{}] {}: {msg}", self.error.category(), self.module)
    }

    pub fn exit_code(&self) -> i32 {
        match self.error {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// report text that `main` prints.
pub fn execute(args: &[String]) -> Result<String, CliError> {
    let cli = Cli::try_parse_from(args).map_err(|e| CliError {
        module: "cli",
        error: Error::Usage(
            e.to_string()
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string(),
        ),
    })?;
    let module = cli.command.module();
    let tag = |error| CliError { module, error };
    let threads = cli.command.common().threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| tag(Error::Usage(format!("cannot build thread pool: {e}"))))?;
    let argv = &args[1..];
    pool.install(|| run_command(&cli.command, argv))
        .map(|o| o.report)
        .map_err(|e| match e {
            Error::Usage(_) => CliError { module: "cli", error: e },
            other => tag(other),
        })
}

/// Entry point for the binary: returns the process exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    if args.iter().skip(1).any(|a| a == "--help" || a == "-h" || a == "--version" || a == "-V") {
        match Cli::try_parse_from(args) {
            Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
                print!("{e}");
                return 0;
            }
            _ => {}
        }
    }
    match execute(args) {
        Ok(report) => {
            if !report.is_empty() {
                println!("{}", report.trim_end());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
