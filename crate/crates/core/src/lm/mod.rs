//! Toy decoder-only conditional token generator.
//!
//! A single causal Transformer stack reads the layout
//! `[BOS_TEXT, x.., BOS_SPEECH, s..]` and is trained to predict every speech id
//! (and a closing EOS) from the text and the speech ids before it. Positions are
//! sinusoidal and restart at zero at the start of the text segment and again at
//! the start of the speech segment.

mod checkpoint;
mod generate;
mod model;
mod params;
mod train;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use checkpoint::{format_loss_curve, CHECKPOINT_MAGIC};
pub use generate::{
    lm_generate, measure_rtf, Decoder, GenerationResult, SamplingConfig, StopReason,
};
pub use model::{lm_forward, lm_loss_and_grad, ForwardOutput, TrainingExample};
pub use params::{LayerSlots, Layout, LmParams, Slot};
pub use train::{lm_train, OptConfig};

/// Floating point type the model can run in: `f32` for training, `f64` for checks.
pub trait Scalar: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn cst<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant representable")
}

/// Indices into the special-embedding table.
pub const BOS_TEXT: usize = 0;
pub const BOS_SPEECH: usize = 1;
pub const EOS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    /// Phoneme alphabet size.
    pub text_vocab: u32,
    /// Speech id vocabulary (base tokens or BPE ids), excluding EOS.
    pub speech_vocab: u32,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl LmConfig {
    pub fn new(text_vocab: u32, speech_vocab: u32) -> Self {
        Self {
            text_vocab,
            speech_vocab,
            dim: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            max_len: 512,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_vocab == 0 || self.speech_vocab == 0 {
            return Err(Error::domain("text and speech vocabularies must be non-empty"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::domain(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::domain("dim must be even for sinusoidal positions"));
        }
        if self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::domain("layers and ff_mult must be positive"));
        }
        if self.max_len < 4 {
            return Err(Error::domain("max_len must leave room for specials and ids"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::domain("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Output classes: every speech id plus EOS.
    pub fn output_size(&self) -> usize {
        self.speech_vocab as usize + 1
    }

    pub fn eos_id(&self) -> u32 {
        self.speech_vocab
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.dim * self.ff_mult
    }
}

/// One row of the sinusoidal table, written into `out` (length `dim`).
pub(crate) fn positional_row<F: Scalar>(pos: usize, out: &mut [F]) {
    let dim = out.len();
    for i in 0..dim / 2 {
        let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
        out[2 * i] = cst(angle.sin());
        out[2 * i + 1] = cst(angle.cos());
    }
}

/// `length x dim` sinusoidal table; `(pos, 2i) = sin(pos / 10000^(2i/dim))`,
/// `(pos, 2i+1)` the matching cosine.
pub fn positional_encoding(length: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::domain(format!("positional encoding needs an even dim, got {dim}")));
    }
    let mut table = vec![0.0; length * dim];
    for (pos, row) in table.chunks_exact_mut(dim).enumerate() {
        positional_row(pos, row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates() {
        let pe = positional_encoding(1, 8).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_one_first_pair() {
        let pe = positional_encoding(2, 4).unwrap();
        assert!((pe[4] - 0.8415).abs() < 1e-4);
        assert!((pe[5] - 0.5403).abs() < 1e-4);
    }

    #[test]
    fn entries_bounded() {
        let pe = positional_encoding(300, 16).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(positional_encoding(3, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = LmConfig::new(4, 8);
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }
}
