//! k-means codebooks over feature frames and nearest-centroid tokenization.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{ByteReader, FeatureMatrix, TokenSequence};
use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"ABPECB01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmeansInit {
    KmeansPlusPlus,
    RandomPoints,
}

impl std::str::FromStr for KmeansInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans_plus_plus" | "kmeans++" => Ok(Self::KmeansPlusPlus),
            "random_points" | "random" => Ok(Self::RandomPoints),
            other => Err(Error::domain(format!("unknown k-means init {other:?}"))),
        }
    }
}

impl std::fmt::Display for KmeansInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::KmeansPlusPlus => "kmeans_plus_plus",
            Self::RandomPoints => "random_points",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once `(prev - cur) <= rel_tol * prev` for successive inertias.
    pub rel_tol: f64,
    pub seed: u64,
    pub init: KmeansInit,
}

impl KmeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 100,
            rel_tol: 1e-6,
            seed: 0,
            init: KmeansInit::KmeansPlusPlus,
        }
    }
}

/// `k x d` centroid table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    centroids: Vec<f32>,
    training_inertia: f64,
}

impl Codebook {
    pub fn new(k: usize, d: usize, centroids: Vec<f32>, training_inertia: f64) -> Result<Self> {
        if k == 0 || d == 0 || centroids.len() != k * d {
            return Err(Error::domain(format!(
                "codebook needs k,d >= 1 and k*d values (k={k}, d={d}, got {})",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("codebook contains non-finite centroid values"));
        }
        if !(training_inertia.is_finite() && training_inertia >= 0.0) {
            return Err(Error::domain("training inertia must be finite and non-negative"));
        }
        Ok(Self {
            k,
            d,
            centroids,
            training_inertia,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.d..(j + 1) * self.d]
    }

    pub fn training_inertia(&self) -> f64 {
        self.training_inertia
    }

    /// Nearest centroid and its squared distance. Ties go to the smallest index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        nearest(&self.centroids, self.d, x)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.centroids.len() * 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&self.training_inertia.to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CODEBOOK_MAGIC)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let inertia = r.f64()?;
        let n = k.checked_mul(d).ok_or_else(|| Error::format("k x d overflows"))?;
        let centroids = r.f32_vec(n)?;
        r.finish()?;
        Self::new(k, d, centroids, inertia)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = f64::from(x) - f64::from(y);
            diff * diff
        })
        .sum()
}

fn nearest(centroids: &[f32], d: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn assign_all(points: &[f32], d: usize, centroids: &[f32]) -> Vec<(usize, f64)> {
    points
        .par_chunks(d)
        .map(|x| nearest(centroids, d, x))
        .collect()
}

fn stack_frames(frames: &[FeatureMatrix]) -> Result<(Vec<f32>, usize)> {
    let d = frames
        .first()
        .map(FeatureMatrix::cols)
        .ok_or_else(|| Error::domain("no training frames"))?;
    if let Some(m) = frames.iter().find(|m| m.cols() != d) {
        return Err(Error::domain(format!(
            "dimension mismatch: {:?} has {} columns, expected {d}",
            m.utt_id(),
            m.cols()
        )));
    }
    let data = frames.iter().flat_map(|m| m.data().iter().copied()).collect();
    Ok((data, d))
}

/// Trains a codebook with Lloyd's algorithm on all frames of all matrices.
pub fn kmeans_train(frames: &[FeatureMatrix], cfg: &KmeansConfig) -> Result<Codebook> {
    let (points, d) = stack_frames(frames)?;
    kmeans_train_points(&points, d, cfg).map(|(cb, _)| cb)
}

/// Lloyd's algorithm over a row-major `n x d` point buffer.
///
/// Returns the codebook and the inertia observed after every assignment step.
/// The history is non-increasing.
pub fn kmeans_train_points(
    points: &[f32],
    d: usize,
    cfg: &KmeansConfig,
) -> Result<(Codebook, Vec<f64>)> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::domain("point buffer is not a whole number of rows"));
    }
    let n = points.len() / d;
    if cfg.k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if cfg.k > n {
        return Err(Error::domain(format!(
            "k = {} exceeds the number of training frames ({n})",
            cfg.k
        )));
    }
    if cfg.max_iters == 0 {
        return Err(Error::domain("max_iters must be at least 1"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("training frames contain non-finite values"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = match cfg.init {
        KmeansInit::KmeansPlusPlus => init_plus_plus(points, d, cfg.k, &mut rng),
        KmeansInit::RandomPoints => index::sample(&mut rng, n, cfg.k)
            .into_iter()
            .flat_map(|i| points[i * d..(i + 1) * d].iter().copied())
            .collect(),
    };

    let mut history = Vec::new();
    let mut updates = 0;
    loop {
        let assigned = assign_all(points, d, &centroids);
        let inertia: f64 = assigned.iter().map(|&(_, dist)| dist).sum();
        if let Some(&prev) = history.last() {
            debug_assert!(inertia <= prev * (1.0 + 1e-12), "inertia rose: {prev} -> {inertia}");
        }
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| prev - inertia <= cfg.rel_tol * prev);
        history.push(inertia);
        if converged || updates == cfg.max_iters {
            let cb = Codebook::new(cfg.k, d, centroids, inertia)?;
            return Ok((cb, history));
        }
        update_centroids(points, d, &assigned, &mut centroids);
        updates += 1;
    }
}

fn init_plus_plus(points: &[f32], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / d;
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let first = rng.random_range(0..n);
    let mut centroids = row(first).to_vec();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while centroids.len() < k * d {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap_or(0)
        } else {
            // fewer distinct points than k: fall back to unused indices
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn update_centroids(points: &[f32], d: usize, assigned: &[(usize, f64)], centroids: &mut [f32]) {
    let k = centroids.len() / d;
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (x, &(j, _)) in points.chunks_exact(d).zip(assigned) {
        counts[j] += 1;
        for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(x) {
            *s += f64::from(v);
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = counts[j] as f64;
            for (c, s) in centroids[j * d..(j + 1) * d]
                .iter_mut()
                .zip(&sums[j * d..(j + 1) * d])
            {
                *c = (s / inv) as f32;
            }
        }
    }

    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return;
    }
    // Re-seed each empty cluster at the point farthest from its updated centroid.
    let mut far: Vec<f64> = points
        .chunks_exact(d)
        .zip(assigned)
        .map(|(x, &(j, _))| sq_dist(x, &centroids[j * d..(j + 1) * d]))
        .collect();
    for j in empty {
        let mut best = 0;
        for (i, &v) in far.iter().enumerate() {
            if v > far[best] {
                best = i;
            }
        }
        centroids[j * d..(j + 1) * d].copy_from_slice(&points[best * d..(best + 1) * d]);
        far[best] = 0.0;
    }
}

/// Maps every frame to the index of its nearest centroid.
pub fn kmeans_assign(m: &FeatureMatrix, cb: &Codebook) -> Result<TokenSequence> {
    if m.cols() != cb.d {
        return Err(Error::domain(format!(
            "dimension mismatch: frames have {} columns, codebook has {}",
            m.cols(),
            cb.d
        )));
    }
    let tokens = assign_all(m.data(), cb.d, &cb.centroids)
        .into_iter()
        .map(|(j, _)| j as u32)
        .collect();
    TokenSequence::new(m.utt_id(), tokens, cb.k as u32)
}

/// Sum over frames of the squared distance to the nearest centroid.
pub fn inertia(frames: &[FeatureMatrix], cb: &Codebook) -> Result<f64> {
    let mut total = 0.0;
    for m in frames {
        if m.cols() != cb.d {
            return Err(Error::domain(format!(
                "dimension mismatch: frames have {} columns, codebook has {}",
                m.cols(),
                cb.d
            )));
        }
        total += assign_all(m.data(), cb.d, &cb.centroids)
            .iter()
            .map(|&(_, dist)| dist)
            .sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f32>]) -> FeatureMatrix {
        FeatureMatrix::from_rows("m", 20.0, rows).unwrap()
    }

    #[test]
    fn two_separable_clouds() {
        let eps = 1e-3f32;
        let mut rows = Vec::new();
        for (dx, dy) in [(eps, 0.0), (-eps, 0.0), (0.0, eps), (0.0, -eps)] {
            rows.push(vec![dx, dy]);
            rows.push(vec![10.0 + dx, 10.0 + dy]);
        }
        let cb = kmeans_train(&[matrix(&rows)], &KmeansConfig::new(2)).unwrap();
        let mut cs: Vec<&[f32]> = (0..2).map(|j| cb.centroid(j)).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (c, want) in cs.iter().zip([[0.0f32, 0.0], [10.0, 10.0]]) {
            assert!((c[0] - want[0]).abs() < 1e-6 && (c[1] - want[1]).abs() < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn single_centroid_is_global_mean() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.25], vec![7.0, 4.0]];
        let cb = kmeans_train(&[matrix(&rows)], &KmeansConfig::new(1)).unwrap();
        for dim in 0..2 {
            let mean = rows.iter().map(|r| f64::from(r[dim])).sum::<f64>() / rows.len() as f64;
            assert_eq!(cb.centroid(0)[dim], mean as f32);
        }
    }

    #[test]
    fn k_larger_than_frames_rejected() {
        let m = matrix(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            kmeans_train(&[m], &KmeansConfig::new(3)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let a = matrix(&[vec![0.0], vec![1.0]]);
        let b = matrix(&[vec![0.0, 1.0]]);
        assert!(kmeans_train(&[a, b], &KmeansConfig::new(1)).is_err());
    }

    fn fixed_codebook() -> Codebook {
        let centroids: Vec<f32> = (0..4).flat_map(|j| [j as f32, 0.0]).collect();
        Codebook::new(4, 2, centroids, 0.0).unwrap()
    }

    #[test]
    fn frame_on_centroid_maps_to_it() {
        let cb = fixed_codebook();
        let toks = kmeans_assign(&matrix(&[vec![3.0, 0.0]]), &cb).unwrap();
        assert_eq!(toks.tokens(), &[3]);
        assert_eq!(toks.alphabet_size(), 4);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let cb = fixed_codebook();
        let toks = kmeans_assign(&matrix(&[vec![1.5, 0.0]]), &cb).unwrap();
        assert_eq!(toks.tokens(), &[1]);
    }

    #[test]
    fn centroids_assign_to_themselves_in_order() {
        let cb = fixed_codebook();
        let m = FeatureMatrix::new("c", 20.0, 4, 2, cb.centroids().to_vec()).unwrap();
        assert_eq!(kmeans_assign(&m, &cb).unwrap().tokens(), &[0, 1, 2, 3]);
    }

    #[test]
    fn inertia_definition() {
        let cb = fixed_codebook();
        let exact = FeatureMatrix::new("c", 20.0, 4, 2, cb.centroids().to_vec()).unwrap();
        assert_eq!(inertia(&[exact], &cb).unwrap(), 0.0);
        let off = matrix(&[vec![0.0, 2.0]]);
        assert_eq!(inertia(&[off], &cb).unwrap(), 4.0);
        assert!(inertia(&[matrix(&[vec![0.0]])], &cb).is_err());
    }

    #[test]
    fn codebook_bytes_roundtrip() {
        let cb = Codebook::new(2, 3, vec![0.1, -2.0, 3.5, 1e-30, 7.0, -0.0], 12.5).unwrap();
        let back = Codebook::from_bytes(&cb.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), cb.to_bytes());
        let mut bytes = cb.to_bytes();
        bytes.pop();
        assert!(Codebook::from_bytes(&bytes).is_err());
    }

    #[test]
    fn training_is_deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<f32> = (0..400).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cfg = KmeansConfig {
            seed: 4,
            ..KmeansConfig::new(7)
        };
        let a = kmeans_train_points(&pts, 2, &cfg).unwrap().0;
        let b = kmeans_train_points(&pts, 2, &cfg).unwrap().0;
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn random_init_also_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<f32> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = KmeansConfig {
            init: KmeansInit::RandomPoints,
            ..KmeansConfig::new(5)
        };
        let (cb, hist) = kmeans_train_points(&pts, 3, &cfg).unwrap();
        assert_eq!(cb.k(), 5);
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    }
}
