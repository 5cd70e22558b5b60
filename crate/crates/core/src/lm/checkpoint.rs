use std::fmt::Write as _;
use std::path::Path;

use super::{LmConfig, LmParams};
use crate::corpus::ByteReader;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ABPELM01";

const TAG_U64: u8 = 0;
const TAG_F64: u8 = 1;

enum Field {
    U64(u64),
    F64(f64),
}

fn config_fields(cfg: &LmConfig) -> Vec<(&'static str, Field)> {
    vec![
        ("text_vocab", Field::U64(cfg.text_vocab as u64)),
        ("speech_vocab", Field::U64(cfg.speech_vocab as u64)),
        ("dim", Field::U64(cfg.dim as u64)),
        ("layers", Field::U64(cfg.layers as u64)),
        ("heads", Field::U64(cfg.heads as u64)),
        ("ff_mult", Field::U64(cfg.ff_mult as u64)),
        ("max_len", Field::U64(cfg.max_len as u64)),
        ("dropout", Field::F64(cfg.dropout)),
        ("seed", Field::U64(cfg.seed)),
    ]
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn read_name(r: &mut ByteReader<'_>) -> Result<String> {
    let len = r.u16()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("name is not UTF-8"))
}

impl LmParams<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.num_params() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let fields = config_fields(self.config());
        out.extend_from_slice(&(fields.len() as u16).to_le_bytes());
        for (name, value) in fields {
            put_name(&mut out, name);
            match value {
                Field::U64(v) => {
                    out.push(TAG_U64);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Field::F64(v) => {
                    out.push(TAG_F64);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let named = self.layout().named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, slot) in named {
            put_name(&mut out, name);
            let dims: &[usize] = if slot.rows == 1 {
                &[slot.cols]
            } else {
                &[slot.rows, slot.cols]
            };
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in self.slot(*slot) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let mut cfg = LmConfig::new(1, 1);
        let mut seen = Vec::new();
        for _ in 0..r.u16()? {
            let name = read_name(&mut r)?;
            let tag = r.u8()?;
            let raw = r.u64()?;
            let as_usize = || {
                if tag != TAG_U64 {
                    return Err(Error::format(format!("field {name} should be an integer")));
                }
                usize::try_from(raw).map_err(|_| Error::format(format!("field {name} out of range")))
            };
            match name.as_str() {
                "text_vocab" | "speech_vocab" => {
                    let v = u32::try_from(as_usize()?)
                        .map_err(|_| Error::format(format!("field {name} out of range")))?;
                    if name == "text_vocab" {
                        cfg.text_vocab = v;
                    } else {
                        cfg.speech_vocab = v;
                    }
                }
                "dim" => cfg.dim = as_usize()?,
                "layers" => cfg.layers = as_usize()?,
                "heads" => cfg.heads = as_usize()?,
                "ff_mult" => cfg.ff_mult = as_usize()?,
                "max_len" => cfg.max_len = as_usize()?,
                "seed" => {
                    as_usize()?;
                    cfg.seed = raw;
                }
                "dropout" => {
                    if tag != TAG_F64 {
                        return Err(Error::format("field dropout should be a float"));
                    }
                    cfg.dropout = f64::from_bits(raw);
                }
                other => return Err(Error::format(format!("unknown config field {other}"))),
            }
            seen.push(name);
        }
        for (name, _) in config_fields(&cfg) {
            if !seen.iter().any(|s| s == name) {
                return Err(Error::format(format!("checkpoint lacks config field {name}")));
            }
        }
        cfg.validate()?;

        let template = super::Layout::new(&cfg);
        let count = r.u32()? as usize;
        if count != template.named().len() {
            return Err(Error::format(format!(
                "checkpoint has {count} tensors, config implies {}",
                template.named().len()
            )));
        }
        let mut data = Vec::with_capacity(template.total);
        for (expected, slot) in template.named() {
            let name = read_name(&mut r)?;
            if &name != expected {
                return Err(Error::format(format!("expected tensor {expected}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let mut numel = 1usize;
            for _ in 0..rank {
                numel = numel.saturating_mul(r.u32()? as usize);
            }
            if numel != slot.len() {
                return Err(Error::format(format!("tensor {name} has the wrong shape")));
            }
            data.extend(r.f32_vec(numel)?);
        }
        r.finish()?;
        LmParams::from_parts(cfg, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `epoch,mean_loss` CSV with 1-based epochs.
pub fn format_loss_curve(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let cfg = LmConfig {
            dim: 8,
            heads: 2,
            dropout: 0.25,
            seed: u64::MAX,
            ..LmConfig::new(3, 7)
        };
        let p = LmParams::<f32>::init(&cfg).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(LmParams::from_bytes(&bytes).unwrap(), p);
        assert!(LmParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(LmParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn loss_csv() {
        assert_eq!(format_loss_curve(&[2.5, 1.0]), "epoch,mean_loss\n1,2.5\n2,1\n");
    }
}
