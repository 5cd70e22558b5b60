use rand::Rng;

use super::{cst, positional_row, LmParams, Scalar, BOS_SPEECH, BOS_TEXT};
use crate::bpe::BpeSequence;
use crate::corpus::SymbolSequence;
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// A paired (phoneme ids, speech ids) training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub text: Vec<u32>,
    pub speech: Vec<u32>,
}

impl TrainingExample {
    pub fn new(text: Vec<u32>, speech: Vec<u32>) -> Self {
        Self { text, speech }
    }

    /// Positions occupied by the full training layout.
    pub fn layout_len(&self) -> usize {
        self.text.len() + self.speech.len() + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InTok {
    Text(u32),
    Speech(u32),
    Special(usize),
}

pub(crate) fn embed_row<F: Scalar>(params: &LmParams<F>, tok: InTok, pos: usize, out: &mut [F]) {
    let layout = params.layout();
    let d = params.config().dim;
    let (slot, row) = match tok {
        InTok::Text(t) => (layout.emb_text, t as usize),
        InTok::Speech(s) => (layout.emb_speech, s as usize),
        InTok::Special(i) => (layout.emb_special, i),
    };
    positional_row(pos, out);
    let emb = &params.slot(slot)[row * d..(row + 1) * d];
    for (o, &e) in out.iter_mut().zip(emb) {
        *o = *o + e;
    }
}

/// Training/scoring layout: `[BOS_TEXT, x.., BOS_SPEECH, s..]` with segment-local positions.
pub(crate) fn build_layout(text: &[u32], speech: &[u32]) -> (Vec<InTok>, Vec<usize>) {
    let mut toks = Vec::with_capacity(text.len() + speech.len() + 2);
    let mut pos = Vec::with_capacity(toks.capacity());
    toks.push(InTok::Special(BOS_TEXT));
    pos.push(0);
    for (i, &t) in text.iter().enumerate() {
        toks.push(InTok::Text(t));
        pos.push(i + 1);
    }
    toks.push(InTok::Special(BOS_SPEECH));
    pos.push(0);
    for (i, &s) in speech.iter().enumerate() {
        toks.push(InTok::Speech(s));
        pos.push(i + 1);
    }
    (toks, pos)
}

pub(crate) fn check_example<F: Scalar>(params: &LmParams<F>, text: &[u32], speech: &[u32]) -> Result<()> {
    let cfg = params.config();
    if let Some(&t) = text.iter().find(|&&t| t >= cfg.text_vocab) {
        return Err(Error::domain(format!(
            "text symbol {t} outside vocabulary of {}",
            cfg.text_vocab
        )));
    }
    if let Some(&s) = speech.iter().find(|&&s| s >= cfg.speech_vocab) {
        return Err(Error::domain(format!(
            "speech id {s} outside vocabulary of {}",
            cfg.speech_vocab
        )));
    }
    let len = text.len() + speech.len() + 2;
    if len > cfg.max_len {
        return Err(Error::domain(format!(
            "layout of {len} positions exceeds max_len {}",
            cfg.max_len
        )));
    }
    Ok(())
}

pub(crate) fn layer_norm<F: Scalar>(
    x: &[F],
    d: usize,
    g: &[F],
    b: &[F],
    out: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    let inv_d = cst::<F>(1.0 / d as f64);
    let eps = cst::<F>(LN_EPS);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
            o[i] = xh[i] * g[i] + b[i];
        }
    }
}

fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    g: &[F],
    d: usize,
    dg: &mut [F],
    db: &mut [F],
    dx: &mut [F],
) {
    let inv_d = cst::<F>(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dg[i] = dg[i] + dyr[i] * xh[i];
            db[i] = db[i] + dyr[i];
            dxhat[i] = dyr[i] * g[i];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_d;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] = dxr[i] + rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

/// `out = x W + b` for row-major `x` (`rows x din`) and `W` (`din x dout`).
pub(crate) fn linear<F: Scalar>(x: &[F], din: usize, w: &[F], b: &[F], dout: usize) -> Vec<F> {
    let rows = x.len() / din;
    let mut out = Vec::with_capacity(rows * dout);
    for xr in x.chunks_exact(din) {
        out.extend_from_slice(b);
        let start = out.len() - dout;
        let o = &mut out[start..];
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &w[i * dout..(i + 1) * dout];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov = *ov + xi * wv;
            }
        }
    }
    out
}

/// Accumulates `dW += x^T dy`, `db += sum(dy)` and returns `dx = dy W^T`.
fn linear_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    din: usize,
    dout: usize,
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    let mut dx = vec![F::zero(); x.len()];
    for ((xr, dyr), dxr) in x
        .chunks_exact(din)
        .zip(dy.chunks_exact(dout))
        .zip(dx.chunks_exact_mut(din))
    {
        for (bv, &g) in db.iter_mut().zip(dyr) {
            *bv = *bv + g;
        }
        for i in 0..din {
            let wr = &w[i * dout..(i + 1) * dout];
            dxr[i] = wr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
            let xi = xr[i];
            if xi != F::zero() {
                for (dwv, &g) in dw[i * dout..(i + 1) * dout].iter_mut().zip(dyr) {
                    *dwv = *dwv + xi * g;
                }
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let inner = cst::<F>(GELU_C) * (x + cst::<F>(GELU_A) * x * x * x);
    cst::<F>(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = cst::<F>(GELU_C);
    let a = cst::<F>(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = cst::<F>(0.5);
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + cst::<F>(3.0) * a * x * x)
}

struct LayerCache<F> {
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `heads x L x L`, lower triangle used.
    probs: Vec<F>,
    ctx: Vec<F>,
    mask_o: Option<Vec<F>>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    c: Vec<F>,
    h1: Vec<F>,
    act: Vec<F>,
    mask_y: Option<Vec<F>>,
}

struct Cache<F> {
    toks: Vec<InTok>,
    layers: Vec<LayerCache<F>>,
    xhatf: Vec<F>,
    rstdf: Vec<F>,
    /// Final-norm output for the scored rows only.
    z: Vec<F>,
    /// First scored row (the BOS_SPEECH position).
    first_scored: usize,
    logits: Vec<F>,
}

fn dropout_mask<F: Scalar, R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<F> {
    let keep = cst::<F>(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect()
}

fn forward<F: Scalar, R: Rng>(
    params: &LmParams<F>,
    toks: Vec<InTok>,
    pos: &[usize],
    first_scored: usize,
    mut dropout: Option<&mut R>,
) -> Cache<F> {
    let cfg = params.config();
    let (d, nh, dh, ff) = (cfg.dim, cfg.heads, cfg.head_dim(), cfg.ff_dim());
    let n = toks.len();
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
    let p_drop = cfg.dropout;

    let mut x = vec![F::zero(); n * d];
    for (t, (&tok, &p)) in toks.iter().zip(pos).enumerate() {
        embed_row(params, tok, p, &mut x[t * d..(t + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for ls in &params.layout().layers {
        let mut a = vec![F::zero(); n * d];
        let mut xhat1 = vec![F::zero(); n * d];
        let mut rstd1 = vec![F::zero(); n];
        layer_norm(&x, d, params.slot(ls.ln1_g), params.slot(ls.ln1_b), &mut a, &mut xhat1, &mut rstd1);
        let q = linear(&a, d, params.slot(ls.wq), params.slot(ls.bq), d);
        let k = linear(&a, d, params.slot(ls.wk), params.slot(ls.bk), d);
        let v = linear(&a, d, params.slot(ls.wv), params.slot(ls.bv), d);

        let mut probs = vec![F::zero(); nh * n * n];
        let mut ctx = vec![F::zero(); n * d];
        for h in 0..nh {
            let hs = h * dh..(h + 1) * dh;
            for t in 0..n {
                let qt = &q[t * d..][hs.clone()];
                let row = &mut probs[(h * n + t) * n..(h * n + t) * n + t + 1];
                let mut max = F::neg_infinity();
                for (u, pr) in row.iter_mut().enumerate() {
                    let ku = &k[u * d..][hs.clone()];
                    let s = qt.iter().zip(ku).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    *pr = s;
                    max = max.max(s);
                }
                let mut sum = F::zero();
                for pr in row.iter_mut() {
                    *pr = (*pr - max).exp();
                    sum = sum + *pr;
                }
                let c = &mut ctx[t * d..][hs.clone()];
                for (u, pr) in row.iter_mut().enumerate() {
                    *pr = *pr / sum;
                    let vu = &v[u * d..][hs.clone()];
                    for (cv, &vv) in c.iter_mut().zip(vu) {
                        *cv = *cv + *pr * vv;
                    }
                }
            }
        }

        let mut o = linear(&ctx, d, params.slot(ls.wo), params.slot(ls.bo), d);
        let mask_o = dropout
            .as_deref_mut()
            .filter(|_| p_drop > 0.0)
            .map(|rng| dropout_mask::<F, R>(n * d, p_drop, rng));
        if let Some(m) = &mask_o {
            o.iter_mut().zip(m).for_each(|(v, &mk)| *v = *v * mk);
        }
        for (xv, &ov) in x.iter_mut().zip(&o) {
            *xv = *xv + ov;
        }

        let mut c = vec![F::zero(); n * d];
        let mut xhat2 = vec![F::zero(); n * d];
        let mut rstd2 = vec![F::zero(); n];
        layer_norm(&x, d, params.slot(ls.ln2_g), params.slot(ls.ln2_b), &mut c, &mut xhat2, &mut rstd2);
        let h1 = linear(&c, d, params.slot(ls.w1), params.slot(ls.b1), ff);
        let act: Vec<F> = h1.iter().map(|&v| gelu(v)).collect();
        let mut y = linear(&act, ff, params.slot(ls.w2), params.slot(ls.b2), d);
        let mask_y = dropout
            .as_deref_mut()
            .filter(|_| p_drop > 0.0)
            .map(|rng| dropout_mask::<F, R>(n * d, p_drop, rng));
        if let Some(m) = &mask_y {
            y.iter_mut().zip(m).for_each(|(v, &mk)| *v = *v * mk);
        }
        for (xv, &yv) in x.iter_mut().zip(&y) {
            *xv = *xv + yv;
        }

        layers.push(LayerCache {
            xhat1,
            rstd1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            mask_o,
            xhat2,
            rstd2,
            c,
            h1,
            act,
            mask_y,
        });
    }

    let layout = params.layout();
    let scored = n - first_scored;
    let mut z = vec![F::zero(); scored * d];
    let mut xhatf = vec![F::zero(); scored * d];
    let mut rstdf = vec![F::zero(); scored];
    layer_norm(
        &x[first_scored * d..],
        d,
        params.slot(layout.lnf_g),
        params.slot(layout.lnf_b),
        &mut z,
        &mut xhatf,
        &mut rstdf,
    );
    let logits = linear(
        &z,
        d,
        params.slot(layout.out_w),
        params.slot(layout.out_b),
        cfg.output_size(),
    );
    Cache {
        toks,
        layers,
        xhatf,
        rstdf,
        z,
        first_scored,
        logits,
    }
}

/// Mean cross-entropy of `logits` rows against `targets`; optionally writes
/// `scale * dloss/dlogits` into `dlogits`.
fn cross_entropy<F: Scalar>(
    logits: &[F],
    vt: usize,
    targets: &[usize],
    mut dlogits: Option<(&mut [F], F)>,
) -> F {
    let n = targets.len();
    let inv_n = cst::<F>(1.0 / n as f64);
    let mut total = F::zero();
    for (r, (row, &tgt)) in logits.chunks_exact(vt).zip(targets).enumerate() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total = total + (lse - row[tgt]);
        if let Some((dl, scale)) = dlogits.as_mut() {
            let g = &mut dl[r * vt..(r + 1) * vt];
            let s = *scale * inv_n;
            for (gv, &l) in g.iter_mut().zip(row) {
                *gv = (l - lse).exp() * s;
            }
            g[tgt] = g[tgt] - s;
        }
    }
    total * inv_n
}

fn backward<F: Scalar>(params: &LmParams<F>, cache: &Cache<F>, dlogits: &[F], grad: &mut [F]) {
    let cfg = params.config();
    let layout = params.layout();
    let (d, nh, dh, ff) = (cfg.dim, cfg.heads, cfg.head_dim(), cfg.ff_dim());
    let n = cache.toks.len();
    let vt = cfg.output_size();
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());

    let (dw, db) = split_two(grad, layout.out_w, layout.out_b);
    let dz = linear_backward(&cache.z, dlogits, d, vt, params.slot(layout.out_w), dw, db);

    let mut dx = vec![F::zero(); n * d];
    {
        let (dg, db) = split_two(grad, layout.lnf_g, layout.lnf_b);
        layer_norm_backward(
            &dz,
            &cache.xhatf,
            &cache.rstdf,
            params.slot(layout.lnf_g),
            d,
            dg,
            db,
            &mut dx[cache.first_scored * d..],
        );
    }

    for (ls, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        // feed-forward block; dx is the gradient w.r.t. the block output
        let mut dy = dx.clone();
        if let Some(m) = &lc.mask_y {
            dy.iter_mut().zip(m).for_each(|(g, &mk)| *g = *g * mk);
        }
        let mut dact = {
            let (dw2, db2) = split_two(grad, ls.w2, ls.b2);
            linear_backward(&lc.act, &dy, ff, d, params.slot(ls.w2), dw2, db2)
        };
        for (g, &h) in dact.iter_mut().zip(&lc.h1) {
            *g = *g * gelu_grad(h);
        }
        let dc = {
            let (dw1, db1) = split_two(grad, ls.w1, ls.b1);
            linear_backward(&lc.c, &dact, d, ff, params.slot(ls.w1), dw1, db1)
        };
        {
            let (dg, db) = split_two(grad, ls.ln2_g, ls.ln2_b);
            layer_norm_backward(&dc, &lc.xhat2, &lc.rstd2, params.slot(ls.ln2_g), d, dg, db, &mut dx);
        }

        // attention block
        let mut do_ = dx.clone();
        if let Some(m) = &lc.mask_o {
            do_.iter_mut().zip(m).for_each(|(g, &mk)| *g = *g * mk);
        }
        let dctx = {
            let (dwo, dbo) = split_two(grad, ls.wo, ls.bo);
            linear_backward(&lc.ctx, &do_, d, d, params.slot(ls.wo), dwo, dbo)
        };
        let mut dq = vec![F::zero(); n * d];
        let mut dk = vec![F::zero(); n * d];
        let mut dv = vec![F::zero(); n * d];
        let mut dp = vec![F::zero(); n];
        for h in 0..nh {
            let hs = h * dh..(h + 1) * dh;
            for t in 0..n {
                let probs = &lc.probs[(h * n + t) * n..(h * n + t) * n + t + 1];
                let dct = &dctx[t * d..][hs.clone()];
                let mut dot_sum = F::zero();
                for (u, &pr) in probs.iter().enumerate() {
                    let vu = &lc.v[u * d..][hs.clone()];
                    dp[u] = dct.iter().zip(vu).map(|(&a, &b)| a * b).sum();
                    dot_sum = dot_sum + pr * dp[u];
                    for (g, &c) in dv[u * d..][hs.clone()].iter_mut().zip(dct) {
                        *g = *g + pr * c;
                    }
                }
                let qt = &lc.q[t * d..][hs.clone()];
                for (u, &pr) in probs.iter().enumerate() {
                    let ds = pr * (dp[u] - dot_sum) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let ku = &lc.k[u * d..][hs.clone()];
                    for (g, &kv) in dq[t * d..][hs.clone()].iter_mut().zip(ku) {
                        *g = *g + ds * kv;
                    }
                    for (g, &qv) in dk[u * d..][hs.clone()].iter_mut().zip(qt) {
                        *g = *g + ds * qv;
                    }
                }
            }
        }
        let mut da = {
            let (dwq, dbq) = split_two(grad, ls.wq, ls.bq);
            linear_backward(&lc.a, &dq, d, d, params.slot(ls.wq), dwq, dbq)
        };
        for (src, w, b) in [(&dk, ls.wk, ls.bk), (&dv, ls.wv, ls.bv)] {
            let (dw, db) = split_two(grad, w, b);
            let part = linear_backward(&lc.a, src, d, d, params.slot(w), dw, db);
            da.iter_mut().zip(&part).for_each(|(g, &p)| *g = *g + p);
        }
        {
            let (dg, db) = split_two(grad, ls.ln1_g, ls.ln1_b);
            layer_norm_backward(&da, &lc.xhat1, &lc.rstd1, params.slot(ls.ln1_g), d, dg, db, &mut dx);
        }
    }

    for (t, &tok) in cache.toks.iter().enumerate() {
        let (slot, row) = match tok {
            InTok::Text(v) => (layout.emb_text, v as usize),
            InTok::Speech(v) => (layout.emb_speech, v as usize),
            InTok::Special(i) => (layout.emb_special, i),
        };
        let g = &mut grad[slot.offset + row * d..slot.offset + (row + 1) * d];
        for (gv, &dv) in g.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
            *gv = *gv + dv;
        }
    }
}

/// Disjoint mutable views of two slots of the gradient buffer.
fn split_two<F>(buf: &mut [F], a: super::Slot, b: super::Slot) -> (&mut [F], &mut [F]) {
    assert!(a.offset + a.len() <= b.offset, "slots must be ordered and disjoint");
    let (lo, hi) = buf.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}

fn targets_for(speech: &[u32], eos: u32) -> Vec<usize> {
    speech
        .iter()
        .chain(std::iter::once(&eos))
        .map(|&s| s as usize)
        .collect()
}

/// Loss and speech-position logits of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    pub loss: F,
    /// `(|s| + 1) x (V + 1)`, row-major; row `i` predicts `s_{i+1}` (or EOS for the last row).
    pub logits: Vec<F>,
}

pub(crate) fn forward_example<F: Scalar>(
    params: &LmParams<F>,
    text: &[u32],
    speech: &[u32],
) -> Result<ForwardOutput<F>> {
    check_example(params, text, speech)?;
    let (toks, pos) = build_layout(text, speech);
    let first = text.len() + 1;
    let cache = forward::<F, rand_chacha::ChaCha8Rng>(params, toks, &pos, first, None);
    let targets = targets_for(speech, params.config().eos_id());
    let loss = cross_entropy(&cache.logits, params.config().output_size(), &targets, None);
    Ok(ForwardOutput {
        loss,
        logits: cache.logits,
    })
}

/// Next-id cross-entropy over the speech segment of `(x, s)`.
pub fn lm_forward<F: Scalar>(
    params: &LmParams<F>,
    x: &SymbolSequence,
    s: &BpeSequence,
) -> Result<ForwardOutput<F>> {
    if x.alphabet_size() != params.config().text_vocab {
        return Err(Error::domain(format!(
            "symbol alphabet {} does not match model text vocabulary {}",
            x.alphabet_size(),
            params.config().text_vocab
        )));
    }
    if s.vocab_size() != params.config().speech_vocab {
        return Err(Error::domain(format!(
            "speech vocabulary {} does not match model speech vocabulary {}",
            s.vocab_size(),
            params.config().speech_vocab
        )));
    }
    forward_example(params, x.symbols(), s.ids())
}

/// Loss of one example; adds `scale * dloss/dparams` into `grad`.
pub fn lm_loss_and_grad<F: Scalar, R: Rng>(
    params: &LmParams<F>,
    example: &TrainingExample,
    scale: F,
    dropout_rng: Option<&mut R>,
    grad: &mut [F],
) -> Result<F> {
    check_example(params, &example.text, &example.speech)?;
    if grad.len() != params.num_params() {
        return Err(Error::domain("gradient buffer does not match parameter count"));
    }
    let (toks, pos) = build_layout(&example.text, &example.speech);
    let first = example.text.len() + 1;
    let cache = forward(params, toks, &pos, first, dropout_rng);
    let targets = targets_for(&example.speech, params.config().eos_id());
    let vt = params.config().output_size();
    let mut dlogits = vec![F::zero(); cache.logits.len()];
    let loss = cross_entropy(&cache.logits, vt, &targets, Some((&mut dlogits, scale)));
    backward(params, &cache, &dlogits, grad);
    Ok(loss)
}
