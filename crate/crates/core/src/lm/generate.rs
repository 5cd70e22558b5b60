use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{embed_row, gelu, layer_norm, linear, InTok};
use super::{cst, LmParams, Scalar, BOS_SPEECH, BOS_TEXT};
use crate::bpe::{decode_ids, BpeSequence, BpeVocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub top_p: f64,
    pub max_new: usize,
    pub seed: u64,
    /// Argmax decoding; ignores the other filters and the seed.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            max_new: 256,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            max_new,
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::domain("temperature must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::domain("top_p must lie in (0, 1]"));
        }
        if self.max_new == 0 {
            return Err(Error::domain("max_new must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxNew,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Eos => "eos",
            StopReason::MaxNew => "max_new",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated speech ids, excluding the prompt and the terminating EOS.
    pub ids: Vec<u32>,
    /// Wall time of the autoregressive loop only.
    pub wall_time_s: f64,
    pub steps: usize,
    pub stopped_by: StopReason,
}

impl GenerationResult {
    pub fn to_sequence(&self, utt_id: impl Into<String>, vocab_size: u32) -> Result<BpeSequence> {
        BpeSequence::new(utt_id, self.ids.clone(), vocab_size)
    }
}

/// Incremental decoder holding per-layer key/value caches.
pub struct Decoder<'a, F: Scalar = f32> {
    params: &'a LmParams<F>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
    x: Vec<F>,
    scores: Vec<F>,
}

impl<'a, F: Scalar> Decoder<'a, F> {
    pub fn new(params: &'a LmParams<F>) -> Self {
        let cfg = params.config();
        Self {
            params,
            keys: vec![Vec::new(); cfg.layers],
            values: vec![Vec::new(); cfg.layers],
            len: 0,
            x: vec![F::zero(); cfg.dim],
            scores: Vec::new(),
        }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one position; returns the final hidden state after the output norm.
    fn step(&mut self, tok: InTok, pos: usize) -> Vec<F> {
        let p = self.params;
        let cfg = p.config();
        let (d, nh, dh, ff) = (cfg.dim, cfg.heads, cfg.head_dim(), cfg.ff_dim());
        let scale = cst::<F>(1.0 / (dh as f64).sqrt());
        let mut x = std::mem::take(&mut self.x);
        embed_row(p, tok, pos, &mut x);
        let mut a = vec![F::zero(); d];
        let mut xhat = vec![F::zero(); d];
        let mut rstd = [F::zero()];
        let t = self.len + 1;
        self.scores.resize(t, F::zero());

        for (l, ls) in p.layout().layers.iter().enumerate() {
            layer_norm(&x, d, p.slot(ls.ln1_g), p.slot(ls.ln1_b), &mut a, &mut xhat, &mut rstd);
            let q = linear(&a, d, p.slot(ls.wq), p.slot(ls.bq), d);
            let k = linear(&a, d, p.slot(ls.wk), p.slot(ls.bk), d);
            let v = linear(&a, d, p.slot(ls.wv), p.slot(ls.bv), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let values = &self.values[l];
            let mut ctx = vec![F::zero(); d];
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let qh = &q[hs.clone()];
                let mut max = F::neg_infinity();
                for (u, s) in self.scores.iter_mut().enumerate() {
                    let ku = &keys[u * d..][hs.clone()];
                    *s = qh.iter().zip(ku).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    max = max.max(*s);
                }
                let mut sum = F::zero();
                for s in self.scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                let c = &mut ctx[hs.clone()];
                for (u, &s) in self.scores.iter().enumerate() {
                    let w = s / sum;
                    for (cv, &vv) in c.iter_mut().zip(&values[u * d..][hs.clone()]) {
                        *cv = *cv + w * vv;
                    }
                }
            }
            let o = linear(&ctx, d, p.slot(ls.wo), p.slot(ls.bo), d);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a = *a + b);

            layer_norm(&x, d, p.slot(ls.ln2_g), p.slot(ls.ln2_b), &mut a, &mut xhat, &mut rstd);
            let mut h1 = linear(&a, d, p.slot(ls.w1), p.slot(ls.b1), ff);
            h1.iter_mut().for_each(|v| *v = gelu(*v));
            let y = linear(&h1, ff, p.slot(ls.w2), p.slot(ls.b2), d);
            x.iter_mut().zip(&y).for_each(|(a, &b)| *a = *a + b);
        }
        self.len = t;
        let layout = p.layout();
        let mut z = vec![F::zero(); d];
        layer_norm(&x, d, p.slot(layout.lnf_g), p.slot(layout.lnf_b), &mut z, &mut xhat, &mut rstd);
        self.x = x;
        z
    }

    fn project(&self, z: &[F]) -> Vec<F> {
        let p = self.params;
        let layout = p.layout();
        linear(z, p.config().dim, p.slot(layout.out_w), p.slot(layout.out_b), p.config().output_size())
    }

    /// Feeds the prompt layout `[BOS_TEXT, text.., BOS_SPEECH, speech..]` and
    /// returns the logits for the next speech id.
    pub fn prefill(&mut self, text: &[u32], speech: &[u32]) -> Result<Vec<F>> {
        if !self.is_empty() {
            return Err(Error::domain("decoder already holds a prompt"));
        }
        let cfg = self.params.config();
        if let Some(&t) = text.iter().find(|&&t| t >= cfg.text_vocab) {
            return Err(Error::domain(format!("text symbol {t} outside vocabulary")));
        }
        if let Some(&s) = speech.iter().find(|&&s| s >= cfg.speech_vocab) {
            return Err(Error::domain(format!("speech id {s} outside vocabulary")));
        }
        let needed = text.len() + speech.len() + 2;
        if needed + 1 > cfg.max_len {
            return Err(Error::domain(format!(
                "prompt layout of {needed} positions leaves no room under max_len {}",
                cfg.max_len
            )));
        }
        self.step(InTok::Special(BOS_TEXT), 0);
        for (i, &t) in text.iter().enumerate() {
            self.step(InTok::Text(t), i + 1);
        }
        let mut z = self.step(InTok::Special(BOS_SPEECH), 0);
        for (i, &s) in speech.iter().enumerate() {
            z = self.step(InTok::Speech(s), i + 1);
        }
        Ok(self.project(&z))
    }

    /// Appends one speech id at segment position `pos` and returns the next logits.
    pub fn push_speech(&mut self, id: u32, pos: usize) -> Vec<F> {
        let z = self.step(InTok::Speech(id), pos);
        self.project(&z)
    }
}

fn argmax<F: Scalar>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Temperature, then top-k, then top-p, then a draw from the renormalized distribution.
fn sample<F: Scalar>(logits: &[F], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.greedy {
        return argmax(logits);
    }
    let inv_t = 1.0 / cfg.temperature;
    let mut cand: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, v.to_f64().unwrap_or(f64::NEG_INFINITY) * inv_t))
        .collect();
    let by_score = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if cfg.top_k > 0 && cfg.top_k < cand.len() {
        cand.select_nth_unstable_by(cfg.top_k - 1, by_score);
        cand.truncate(cfg.top_k);
    }
    cand.sort_unstable_by(by_score);
    let max = cand[0].1;
    let mut probs: Vec<f64> = cand.iter().map(|&(_, s)| (s - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    if cfg.top_p < 1.0 {
        let mut acc = 0.0;
        let mut keep = probs.len();
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if acc >= cfg.top_p {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
    let mut u: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return cand[i].0;
        }
        u -= p;
    }
    cand[probs.len() - 1].0
}

/// Continues `[BOS_TEXT, x_prompt.., x.., BOS_SPEECH, s_prompt..]` until EOS or
/// `max_new` ids. Generation also stops once the layout reaches `max_len`.
pub fn lm_generate<F: Scalar>(
    params: &LmParams<F>,
    x_prompt: &[u32],
    x: &[u32],
    s_prompt: &[u32],
    sampling: &SamplingConfig,
) -> Result<GenerationResult> {
    sampling.validate()?;
    let text: Vec<u32> = x_prompt.iter().chain(x).copied().collect();
    let mut dec = Decoder::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let eos = params.config().eos_id() as usize;
    let max_len = params.config().max_len;

    let mut logits = dec.prefill(&text, s_prompt)?;
    let start = Instant::now();
    let mut ids = Vec::new();
    let mut stopped_by = StopReason::MaxNew;
    loop {
        let next = sample(&logits, sampling, &mut rng);
        if next == eos {
            stopped_by = StopReason::Eos;
            break;
        }
        ids.push(next as u32);
        if ids.len() >= sampling.max_new || dec.len() >= max_len {
            break;
        }
        logits = dec.push_speech(next as u32, s_prompt.len() + ids.len());
    }
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(GenerationResult {
        steps: ids.len(),
        ids,
        wall_time_s,
        stopped_by,
    })
}

/// Generation wall time over the duration of the decoded base tokens.
pub fn measure_rtf(res: &GenerationResult, vocab: &BpeVocab, frame_shift_ms: f64) -> Result<f64> {
    if res.ids.is_empty() {
        return Err(Error::domain("RTF is undefined for an empty generation"));
    }
    if !(frame_shift_ms > 0.0) {
        return Err(Error::domain("frame shift must be positive"));
    }
    let base = decode_ids(&res.ids, vocab)?.len();
    Ok(res.wall_time_s / (base as f64 * frame_shift_ms / 1000.0))
}
