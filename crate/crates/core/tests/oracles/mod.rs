//! Deliberately naive reference implementations used only by tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use abpe::lm::{lm_loss_and_grad, LmConfig, LmParams, TrainingExample};
use rand_chacha::ChaCha8Rng;

/// Recounts every adjacent pair after each merge. Ties go to the smallest pair.
pub fn bpe_train(corpus: &[Vec<u32>], k: u32, target: u32, min_freq: u64) -> (Vec<(u32, u32)>, Vec<u64>) {
    let mut seqs: Vec<Vec<u32>> = corpus.to_vec();
    let mut merges = Vec::new();
    let mut freqs = Vec::new();
    while k + (merges.len() as u32) < target {
        let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let Some((&pair, &freq)) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        else {
            break;
        };
        if freq < min_freq {
            break;
        }
        let id = k + merges.len() as u32;
        for s in &mut seqs {
            *s = apply_merge(s, pair, id);
        }
        merges.push(pair);
        freqs.push(freq);
    }
    (merges, freqs)
}

/// Left-to-right, non-overlapping replacement of one pair.
pub fn apply_merge(s: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if i + 1 < s.len() && (s[i], s[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(s[i]);
            i += 1;
        }
    }
    out
}

/// Applies every merge in rank order, each as a full sweep.
pub fn bpe_encode(s: &[u32], k: u32, merges: &[(u32, u32)]) -> Vec<u32> {
    let mut cur = s.to_vec();
    for (r, &pair) in merges.iter().enumerate() {
        cur = apply_merge(&cur, pair, k + r as u32);
    }
    cur
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum()
}

/// Index of the first nearest centroid.
pub fn nearest(centroids: &[f32], d: usize, x: &[f32]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(c, x);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0
}

/// Minimum sum of squared distances to cluster means over every partition of
/// `points` into `k` non-empty groups.
pub fn kmeans_optimum(points: &[[f64; 2]], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            let sse: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| {
                    let c = counts[l] as f64;
                    (p[0] - sums[l][0] / c).powi(2) + (p[1] - sums[l][1] / c).powi(2)
                })
                .sum();
            best = best.min(sse);
        }
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

/// Plain Levenshtein distance, filled row by row.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut row = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(row[j] + 1);
        }
        prev = row;
    }
    prev[b.len()]
}

pub fn mcd_frame(a: &[f32], b: &[f32]) -> f64 {
    10.0 / std::f64::consts::LN_10 * (2.0 * sq_dist(a, b)).sqrt()
}

/// Enumerates every monotone path from the first to the last frame pair.
/// Returns the minimum cost divided by the path length; equal costs prefer the
/// shorter path.
pub fn dtw_exhaustive(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    fn walk(
        i: usize,
        j: usize,
        cost: f64,
        len: usize,
        local: &dyn Fn(usize, usize) -> f64,
        n: usize,
        m: usize,
        best: &mut (f64, usize),
    ) {
        let cost = cost + local(i, j);
        let len = len + 1;
        if i + 1 == n && j + 1 == m {
            if cost < best.0 || (cost == best.0 && len < best.1) {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < n && j + 1 < m {
            walk(i + 1, j + 1, cost, len, local, n, m, best);
        }
        if i + 1 < n {
            walk(i + 1, j, cost, len, local, n, m, best);
        }
        if j + 1 < m {
            walk(i, j + 1, cost, len, local, n, m, best);
        }
    }
    let local = |i: usize, j: usize| mcd_frame(&a[i], &b[j]);
    let mut best = (f64::INFINITY, usize::MAX);
    walk(0, 0, 0.0, 0, &local, a.len(), b.len(), &mut best);
    best.0 / best.1 as f64
}

fn lm_loss(p: &LmParams<f64>, ex: &TrainingExample) -> f64 {
    let mut g = vec![0.0; p.num_params()];
    lm_loss_and_grad::<f64, ChaCha8Rng>(p, ex, 1.0, None, &mut g).unwrap()
}

/// Worst per-tensor relative error between analytic and central-difference gradients.
pub fn gradient_check(cfg: &LmConfig, ex: &TrainingExample, eps: f64) -> Vec<(String, f64)> {
    let mut p = LmParams::<f64>::init(cfg).unwrap();
    // non-trivial norm parameters so their gradients are exercised too
    let named = p.layout().named().to_vec();
    for (i, v) in p.data_mut().iter_mut().enumerate() {
        *v += 0.05 * ((i as f64) * 0.7).sin();
    }
    let mut analytic = vec![0.0; p.num_params()];
    lm_loss_and_grad::<f64, ChaCha8Rng>(&p, ex, 1.0, None, &mut analytic).unwrap();
    named
        .iter()
        .map(|(name, slot)| {
            let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
            for i in slot.range() {
                let orig = p.data()[i];
                p.data_mut()[i] = orig + eps;
                let up = lm_loss(&p, ex);
                p.data_mut()[i] = orig - eps;
                let down = lm_loss(&p, ex);
                p.data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                diff += (fd - analytic[i]).powi(2);
                na += analytic[i].powi(2);
                nf += fd.powi(2);
            }
            // floor for tensors whose gradient is identically zero
            let denom = na.sqrt().max(nf.sqrt()).max(1e-6);
            (name.clone(), diff.sqrt() / denom)
        })
        .collect()
}

