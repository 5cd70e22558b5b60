use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{cst, LmConfig, Scalar};
use crate::error::{Error, Result};

/// A named `rows x cols` tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

/// Placement of every tensor in the flat buffer. Weight matrices are stored
/// `in x out`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub emb_text: Slot,
    pub emb_speech: Slot,
    pub emb_special: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
    pub total: usize,
    named: Vec<(String, Slot)>,
}

impl Layout {
    pub fn new(cfg: &LmConfig) -> Self {
        let d = cfg.dim;
        let f = cfg.ff_dim();
        let mut named = Vec::new();
        let mut offset = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            named.push((name, s));
            s
        };
        let emb_text = slot("emb.text".into(), cfg.text_vocab as usize, d);
        let emb_speech = slot("emb.speech".into(), cfg.speech_vocab as usize, d);
        let emb_special = slot("emb.special".into(), 3, d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut s = |n: &str, r, c| slot(format!("layer{l}.{n}"), r, c);
                LayerSlots {
                    ln1_g: s("ln1.g", 1, d),
                    ln1_b: s("ln1.b", 1, d),
                    wq: s("attn.wq", d, d),
                    bq: s("attn.bq", 1, d),
                    wk: s("attn.wk", d, d),
                    bk: s("attn.bk", 1, d),
                    wv: s("attn.wv", d, d),
                    bv: s("attn.bv", 1, d),
                    wo: s("attn.wo", d, d),
                    bo: s("attn.bo", 1, d),
                    ln2_g: s("ln2.g", 1, d),
                    ln2_b: s("ln2.b", 1, d),
                    w1: s("ff.w1", d, f),
                    b1: s("ff.b1", 1, f),
                    w2: s("ff.w2", f, d),
                    b2: s("ff.b2", 1, d),
                }
            })
            .collect();
        let lnf_g = slot("final.ln.g".into(), 1, d);
        let lnf_b = slot("final.ln.b".into(), 1, d);
        let out_w = slot("out.w".into(), d, cfg.output_size());
        let out_b = slot("out.b".into(), 1, cfg.output_size());
        Self {
            emb_text,
            emb_speech,
            emb_special,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            total: offset,
            named,
        }
    }

    /// Every tensor with its checkpoint name, in storage order.
    pub fn named(&self) -> &[(String, Slot)] {
        &self.named
    }
}

/// Model weights in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<F = f32> {
    config: LmConfig,
    layout: Arc<Layout>,
    data: Vec<F>,
}

impl<F: Scalar> LmParams<F> {
    /// Random initialization, reproducible from `cfg.seed`.
    pub fn init(cfg: &LmConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut data = vec![F::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fill = |data: &mut [F], slot: Slot, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut data[slot.range()] {
                *v = cst(normal.sample(&mut rng));
            }
        };
        fill(&mut data, layout.emb_text, 1.0);
        fill(&mut data, layout.emb_speech, 1.0);
        fill(&mut data, layout.emb_special, 1.0);
        let d = cfg.dim as f64;
        let residual_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        for l in &layout.layers {
            fill(&mut data, l.wq, d.powf(-0.5));
            fill(&mut data, l.wk, d.powf(-0.5));
            fill(&mut data, l.wv, d.powf(-0.5));
            fill(&mut data, l.wo, d.powf(-0.5) * residual_scale);
            fill(&mut data, l.w1, d.powf(-0.5));
            fill(&mut data, l.w2, (cfg.ff_dim() as f64).powf(-0.5) * residual_scale);
            data[l.ln1_g.range()].fill(F::one());
            data[l.ln2_g.range()].fill(F::one());
        }
        data[layout.lnf_g.range()].fill(F::one());
        fill(&mut data, layout.out_w, d.powf(-0.5));
        Ok(Self {
            config: cfg.clone(),
            layout: Arc::new(layout),
            data,
        })
    }

    pub(crate) fn from_parts(config: LmConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::domain(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("parameters contain non-finite values"));
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            data,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn slot(&self, s: Slot) -> &[F] {
        &self.data[s.range()]
    }

    pub fn slot_mut(&mut self, s: Slot) -> &mut [F] {
        &mut self.data[s.range()]
    }

    pub fn cast<G: Scalar>(&self) -> LmParams<G> {
        LmParams {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            data: self
                .data
                .iter()
                .map(|v| G::from(*v).expect("cast between float widths"))
                .collect(),
        }
    }

    /// Same weights under a different `max_len`, the only field that does not
    /// affect tensor shapes.
    pub fn with_max_len(&self, max_len: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.max_len = max_len;
        config.validate()?;
        Ok(Self {
            config,
            layout: Arc::clone(&self.layout),
            data: self.data.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }
}
