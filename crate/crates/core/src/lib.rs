//! Acoustic byte-pair encoding toolkit: feature quantization, integer-domain BPE
//! over the resulting tokens, a small conditional token language model, and the
//! evaluation metrics used to compare token streams.

pub mod bench;
pub mod bpe;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod quantizer;

pub use error::{Error, Result};
