use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{check_example, lm_loss_and_grad, TrainingExample};
use super::{LmConfig, LmParams};
use crate::error::{Error, Result};

/// Examples per parallel gradient chunk. Chunks are reduced in index order so
/// the result does not depend on the thread count.
const CHUNK: usize = 4;

/// AdamW settings and batching.
#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Upper bound on layout positions per batch; a batch always holds at least one example.
    pub batch_tokens: usize,
    /// Batches per optimizer update.
    pub grad_accum: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 10,
            batch_tokens: 2048,
            grad_accum: 1,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain("lr must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::domain("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::domain("eps must be positive and weight_decay non-negative"));
        }
        if self.batch_tokens == 0 || self.grad_accum == 0 {
            return Err(Error::domain("batch_tokens and grad_accum must be positive"));
        }
        Ok(())
    }
}

fn batches(order: &[usize], corpus: &[TrainingExample], budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for &i in order {
        let len = corpus[i].layout_len();
        if !cur.is_empty() && used + len > budget {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += len;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d80f);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Trains from `cfg.seed`; returns the parameters and the per-epoch mean loss.
pub fn lm_train(
    corpus: &[TrainingExample],
    cfg: &LmConfig,
    opt: &OptConfig,
) -> Result<(LmParams, Vec<f64>)> {
    opt.validate()?;
    let mut params = LmParams::<f32>::init(cfg)?;
    if corpus.is_empty() {
        return Err(Error::domain("training corpus is empty"));
    }
    for ex in corpus {
        check_example(&params, &ex.text, &ex.speech)?;
    }

    let n = params.num_params();
    let decay_mask: Vec<bool> = {
        let mut m = vec![false; n];
        for (_, slot) in params.layout().named() {
            if slot.rows > 1 {
                m[slot.range()].fill(true);
            }
        }
        m
    };
    let mut m1 = vec![0f32; n];
    let mut m2 = vec![0f32; n];
    let mut grad = vec![0f32; n];
    let mut step = 0u32;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut curve = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        order.shuffle(&mut shuffle_rng);
        let groups = batches(&order, corpus, opt.batch_tokens);
        let mut epoch_loss = 0f64;
        for (bi, batch) in groups.iter().enumerate() {
            let scale = 1.0 / (batch.len() * opt.grad_accum) as f32;
            let chunks: Vec<(Vec<f32>, f64)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = vec![0f32; n];
                    let mut loss = 0f64;
                    for &i in chunk {
                        let mut rng = example_rng(cfg.seed, epoch, i);
                        let l = lm_loss_and_grad(&params, &corpus[i], scale, Some(&mut rng), &mut g)?;
                        loss += l as f64;
                    }
                    Ok((g, loss))
                })
                .collect::<Result<_>>()?;
            for (g, loss) in chunks {
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss in epoch {} batch {bi}",
                        epoch + 1
                    )));
                }
                epoch_loss += loss;
                grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }

            let last = bi + 1 == groups.len();
            if (bi + 1) % opt.grad_accum == 0 || last {
                step += 1;
                adamw_step(params.data_mut(), &mut grad, &mut m1, &mut m2, &decay_mask, opt, step);
                if params.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged(format!(
                        "non-finite parameters after update {step} (epoch {})",
                        epoch + 1
                    )));
                }
            }
        }
        curve.push(epoch_loss / corpus.len() as f64);
    }
    Ok((params, curve))
}

fn adamw_step(
    w: &mut [f32],
    grad: &mut [f32],
    m1: &mut [f32],
    m2: &mut [f32],
    decay: &[bool],
    opt: &OptConfig,
    step: u32,
) {
    let (b1, b2) = opt.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let lr = opt.lr as f32;
    let wd = (opt.lr * opt.weight_decay) as f32;
    let (b1, b2, eps) = (b1 as f32, b2 as f32, opt.eps as f32);
    let (c1, c2) = (c1 as f32, c2 as f32);
    for i in 0..w.len() {
        let g = grad[i];
        m1[i] = b1 * m1[i] + (1.0 - b1) * g;
        m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
        if decay[i] {
            w[i] -= wd * w[i];
        }
        w[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        grad[i] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_respect_budget() {
        let corpus: Vec<_> = (0..5)
            .map(|i| TrainingExample::new(vec![0; i + 1], vec![0; 2]))
            .collect();
        let order: Vec<usize> = (0..5).collect();
        let b = batches(&order, &corpus, 12);
        assert_eq!(b, vec![vec![0, 1], vec![2], vec![3], vec![4]]);
        assert_eq!(batches(&order, &corpus, 1).len(), 5);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let cfg = LmConfig {
            dim: 8,
            heads: 2,
            ..LmConfig::new(3, 5)
        };
        let opt = OptConfig {
            epochs: 0,
            ..OptConfig::default()
        };
        let corpus = vec![TrainingExample::new(vec![1], vec![2, 3])];
        let (p, curve) = lm_train(&corpus, &cfg, &opt).unwrap();
        assert_eq!(p, LmParams::init(&cfg).unwrap());
        assert!(curve.is_empty());
    }

    #[test]
    fn bad_example_rejected_before_training() {
        let cfg = LmConfig {
            dim: 8,
            heads: 2,
            ..LmConfig::new(3, 5)
        };
        let corpus = vec![TrainingExample::new(vec![7], vec![2])];
        assert!(lm_train(&corpus, &cfg, &OptConfig::default()).is_err());
        assert!(lm_train(&[], &cfg, &OptConfig::default()).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_or_stays_finite() {
        let cfg = LmConfig {
            dim: 8,
            heads: 2,
            ..LmConfig::new(3, 5)
        };
        let opt = OptConfig {
            lr: 1e30,
            epochs: 5,
            ..OptConfig::default()
        };
        let corpus = vec![TrainingExample::new(vec![1, 2], vec![2, 3, 4])];
        match lm_train(&corpus, &cfg, &opt) {
            Err(e) => assert_eq!(e.category(), "diverged"),
            Ok((_, curve)) => assert!(curve.iter().all(|l| l.is_finite())),
        }
    }
}
