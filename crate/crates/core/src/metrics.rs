//! Objective evaluation: WER, MCD with DTW, prosody frames, NDB and JS divergence.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::quantizer::{kmeans_train_points, sq_dist, KmeansConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerResult {
    pub rate: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl WerResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Word error rate from a unit-cost Levenshtein alignment.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WerResult> {
    if reference.is_empty() {
        return Err(Error::domain("WER needs a non-empty reference"));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let (mut s, mut d, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = dp[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hyp[j - 1]);
            if cur == dp[(i - 1) * w + j - 1] + mismatch {
                s += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == dp[(i - 1) * w + j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerResult {
        rate: (s + d + ins) as f64 / n as f64,
        substitutions: s,
        deletions: d,
        insertions: ins,
    })
}

/// `10 / ln 10 * sqrt(2)`, the per-frame MCD scale.
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2
}

/// Mel-cepstral distortion of one frame pair (c0 already excluded by the caller).
pub fn mcd_frame(a: &[f32], b: &[f32]) -> f64 {
    10.0 / std::f64::consts::LN_10 * (2.0 * sq_dist(a, b)).sqrt()
}

/// Minimum-cost monotone alignment with steps (1,0), (0,1), (1,1), anchored at
/// both corners. Returns accumulated cost divided by the number of aligned
/// frame pairs on the path; among equal-cost paths the shortest is used.
pub fn mcd_dtw(reference: &FeatureMatrix, hyp: &FeatureMatrix) -> Result<f64> {
    if reference.cols() != hyp.cols() {
        return Err(Error::domain(format!(
            "feature dimensions differ: {} vs {}",
            reference.cols(),
            hyp.cols()
        )));
    }
    let (n, m) = (reference.rows(), hyp.rows());
    let mut cost = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let local = mcd_frame(reference.row(i), hyp.row(j));
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                let mut consider = |c: (f64, usize)| {
                    if c.0 < best.0 || (c.0 == best.0 && c.1 < best.1) {
                        best = c;
                    }
                };
                if i > 0 && j > 0 {
                    consider(cost[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    consider(cost[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(cost[i * m + j - 1]);
                }
                best
            };
            cost[i * m + j] = (best.0 + local, best.1 + 1);
        }
    }
    let (total, steps) = cost[n * m - 1];
    Ok(total / steps as f64)
}

/// One analysis frame of [`extract_prosody`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProsodyFrame {
    /// Hz; 0 when unvoiced.
    pub pitch: f64,
    pub pov: f64,
    pub energy: f64,
}

pub const ENERGY_FLOOR: f64 = 1e-10;
const MIN_PITCH_HZ: f64 = 60.0;
const MAX_PITCH_HZ: f64 = 400.0;
const VOICING_THRESHOLD: f64 = 0.5;

fn analyse_frame(frame: &[f64], sample_rate: f64) -> ProsodyFrame {
    let energy = (ENERGY_FLOOR + frame.iter().map(|x| x * x).sum::<f64>()).ln();
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    let min_lag = (sample_rate / MAX_PITCH_HZ).floor().max(1.0) as usize;
    let max_lag = ((sample_rate / MIN_PITCH_HZ).ceil() as usize).min(x.len() - 1);
    if min_lag >= max_lag {
        return ProsodyFrame { pitch: 0.0, pov: 0.0, energy };
    }
    // lags min_lag - 1 ..= max_lag + 1 for interpolation at the edges
    let lo = min_lag - 1;
    let hi = (max_lag + 1).min(x.len() - 1);
    let r: Vec<f64> = (lo..=hi)
        .map(|lag| {
            let (a, b) = (&x[..x.len() - lag], &x[lag..]);
            let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let den = (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    let at = |lag: usize| r[lag - lo];
    let peak = (min_lag..=max_lag).map(at).fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return ProsodyFrame { pitch: 0.0, pov: 0.0, energy };
    }
    // first local maximum close to the global peak, so octave multiples lose
    let lag = (min_lag..=max_lag)
        .find(|&l| {
            let v = at(l);
            v >= 0.95 * peak && v >= at(l - 1) && (l + 1 > hi || v >= at(l + 1))
        })
        .unwrap_or(min_lag);
    let pov = at(lag).clamp(0.0, 1.0);
    let mut period = lag as f64;
    if lag > lo && lag < hi {
        let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            period += 0.5 * (a - c) / denom;
        }
    }
    let pitch = if pov >= VOICING_THRESHOLD { sample_rate / period } else { 0.0 };
    ProsodyFrame { pitch, pov, energy }
}

/// Frame-level pitch, probability of voicing and log energy.
///
/// Returns a `frames x 3` matrix with columns (pitch, pov, energy).
pub fn extract_prosody(
    samples: &[f32],
    sample_rate: u32,
    frame_ms: f64,
    hop_ms: f64,
) -> Result<FeatureMatrix> {
    let frames = prosody_frames(samples, sample_rate, frame_ms, hop_ms)?;
    let data = frames
        .iter()
        .flat_map(|f| [f.pitch as f32, f.pov as f32, f.energy as f32])
        .collect();
    FeatureMatrix::new("prosody", hop_ms as f32, frames.len(), 3, data)
}

pub fn prosody_frames(
    samples: &[f32],
    sample_rate: u32,
    frame_ms: f64,
    hop_ms: f64,
) -> Result<Vec<ProsodyFrame>> {
    if sample_rate < 8000 {
        return Err(Error::domain(format!("sample rate {sample_rate} is below 8000")));
    }
    if !(frame_ms > 0.0 && hop_ms > 0.0) {
        return Err(Error::domain("frame and hop lengths must be positive"));
    }
    let sr = sample_rate as f64;
    let frame_len = (sr * frame_ms / 1000.0).round() as usize;
    let hop = ((sr * hop_ms / 1000.0).round() as usize).max(1);
    if frame_len < 2 || samples.len() < frame_len {
        return Err(Error::domain(format!(
            "signal of {} samples is shorter than one {frame_ms} ms frame",
            samples.len()
        )));
    }
    let count = (samples.len() - frame_len) / hop + 1;
    Ok((0..count)
        .into_par_iter()
        .map(|f| {
            let frame: Vec<f64> = samples[f * hop..f * hop + frame_len]
                .iter()
                .map(|&v| v as f64)
                .collect();
            analyse_frame(&frame, sr)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZTest {
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided pooled two-proportion z-test. The p-value lies in `(0, 1]`.
pub fn two_proportion_z(c1: u64, n1: u64, c2: u64, n2: u64) -> Result<ZTest> {
    if n1 == 0 || n2 == 0 || c1 > n1 || c2 > n2 {
        return Err(Error::domain(format!(
            "invalid counts {c1}/{n1} and {c2}/{n2}"
        )));
    }
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (c1 + c2) as f64 / (n1f + n2f);
    if pooled <= 0.0 || pooled >= 1.0 {
        return Ok(ZTest { z: 0.0, p_value: 1.0 });
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    let z = (c1 as f64 / n1f - c2 as f64 / n2f) / se;
    let p_value = libm::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(ZTest { z, p_value })
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("{name} has invalid mass {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::domain("distributions must be non-empty and of equal length"));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let kl_to_mid = |a: f64, b: f64| {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            a * (a / m).ln()
        } else {
            0.0
        }
    };
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| 0.5 * (kl_to_mid(a, b) + kl_to_mid(b, a)))
        .sum();
    Ok(js.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdbConfig {
    pub k_bins: usize,
    pub alpha: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for NdbConfig {
    fn default() -> Self {
        Self {
            k_bins: 100,
            alpha: 0.05,
            repeats: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub ndb: f64,
    pub js: f64,
    pub k_bins: usize,
    pub alpha: f64,
    pub repeats: usize,
    pub per_repeat: Vec<(f64, f64)>,
}

impl DiversityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,ndb,js\n");
        for (i, (n, j)) in self.per_repeat.iter().enumerate() {
            let _ = writeln!(out, "{},{n},{j}", i + 1);
        }
        let _ = writeln!(out, "mean,{},{}", self.ndb, self.js);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "k_bins {}  alpha {}  repeats {}\nrepeat      NDB        JS\n",
            self.k_bins, self.alpha, self.repeats
        );
        for (i, (n, j)) in self.per_repeat.iter().enumerate() {
            let _ = writeln!(out, "{:>6} {:>8.3} {:>9.5}", i + 1, n, j);
        }
        let _ = writeln!(out, "{:>6} {:>8.3} {:>9.5}", "mean", self.ndb, self.js);
        out
    }
}

/// Number of statistically different bins (as a fraction of `k_bins`) and JS
/// divergence between the bin occupancies of two row-major sample sets.
pub fn ndb_js(samples_a: &[f32], samples_b: &[f32], dim: usize, cfg: &NdbConfig) -> Result<DiversityReport> {
    if dim == 0 || samples_a.len() % dim != 0 || samples_b.len() % dim != 0 {
        return Err(Error::domain("sample buffers must hold whole rows of the given dimension"));
    }
    let (na, nb) = (samples_a.len() / dim, samples_b.len() / dim);
    if na == 0 || nb == 0 {
        return Err(Error::domain("both sample sets must be non-empty"));
    }
    if cfg.k_bins == 0 || cfg.k_bins > na {
        return Err(Error::domain(format!(
            "k_bins {} must lie in 1..={na} (size of the first set)",
            cfg.k_bins
        )));
    }
    if cfg.repeats == 0 || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::domain("repeats must be positive and alpha in (0, 1)"));
    }
    let per_repeat = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let km = KmeansConfig {
                seed: cfg.seed.wrapping_add(r as u64),
                ..KmeansConfig::new(cfg.k_bins)
            };
            let (cb, _) = kmeans_train_points(samples_a, dim, &km)?;
            let hist = |s: &[f32]| {
                let mut h = vec![0u64; cfg.k_bins];
                for row in s.chunks_exact(dim) {
                    h[cb.nearest(row).0] += 1;
                }
                h
            };
            let (ha, hb) = (hist(samples_a), hist(samples_b));
            let mut different = 0usize;
            for (&ca, &cb) in ha.iter().zip(&hb) {
                if two_proportion_z(ca, na as u64, cb, nb as u64)?.p_value < cfg.alpha {
                    different += 1;
                }
            }
            let pa: Vec<f64> = ha.iter().map(|&c| c as f64 / na as f64).collect();
            let pb: Vec<f64> = hb.iter().map(|&c| c as f64 / nb as f64).collect();
            let js = js_divergence(&pa, &pb)?;
            Ok((different as f64 / cfg.k_bins as f64, js))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_repeat.len() as f64;
    Ok(DiversityReport {
        ndb: per_repeat.iter().map(|p| p.0).sum::<f64>() / n,
        js: per_repeat.iter().map(|p| p.1).sum::<f64>() / n,
        k_bins: cfg.k_bins,
        alpha: cfg.alpha,
        repeats: cfg.repeats,
        per_repeat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        let r = wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!((r.rate, r.errors()), (0.0, 0));
        let r = wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap();
        assert_eq!(r.substitutions, 1);
        assert!((r.rate - 1.0 / 3.0).abs() < 1e-15);
        let r = wer(&["a", "b"], &[]).unwrap();
        assert_eq!((r.deletions, r.rate), (2, 1.0));
        let r = wer(&["a"], &["x", "a", "y"]).unwrap();
        assert_eq!((r.insertions, r.errors()), (2, 2));
        assert!(wer::<&str>(&[], &["a"]).is_err());
    }

    fn fm(rows: &[Vec<f32>]) -> FeatureMatrix {
        FeatureMatrix::from_rows("t", 10.0, rows).unwrap()
    }

    #[test]
    fn mcd_examples() {
        let a = fm(&[vec![1.0, 2.0], vec![0.5, 0.0], vec![3.0, 1.0]]);
        assert_eq!(mcd_dtw(&a, &a).unwrap(), 0.0);
        let x = fm(&[vec![0.0, 0.0, 0.0]]);
        let y = fm(&[vec![0.0, 1.0, 0.0]]);
        assert!((mcd_dtw(&x, &y).unwrap() - 6.1415).abs() < 5e-4);
        assert!((mcd_dtw(&x, &y).unwrap() - mcd_constant()).abs() < 1e-12);
        assert!(mcd_dtw(&a, &x).is_err());
    }

    #[test]
    fn z_test_examples() {
        let t = two_proportion_z(5, 10, 50, 100).unwrap();
        assert_eq!((t.z, t.p_value), (0.0, 1.0));
        let t = two_proportion_z(30, 100, 10, 100).unwrap();
        assert!((t.z - 3.5355).abs() < 1e-4);
        assert!((t.p_value - 4.07e-4).abs() < 5e-6);
        assert_eq!(two_proportion_z(0, 10, 0, 10).unwrap().p_value, 1.0);
        assert!(two_proportion_z(11, 10, 0, 10).is_err());
        let extreme = two_proportion_z(1_000_000, 1_000_000, 0, 1_000_000).unwrap();
        assert!(extreme.p_value > 0.0);
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let d = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        let d = js_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((d - 0.033823).abs() < 1e-6);
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[-0.5, 1.5], &[0.5, 0.5]).is_err());
    }

    fn sine(freq: f64, amp: f32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() as f32)
            .collect()
    }

    #[test]
    fn prosody_of_sine() {
        let frames = prosody_frames(&sine(200.0, 0.5, 16000), 16000, 25.0, 10.0).unwrap();
        for f in &frames[1..frames.len() - 1] {
            assert!((f.pitch - 200.0).abs() < 5.0, "{f:?}");
            assert!(f.pov > 0.9);
        }
        let loud = prosody_frames(&sine(200.0, 1.0, 16000), 16000, 25.0, 10.0).unwrap();
        for (a, b) in frames.iter().zip(&loud) {
            assert!((b.energy - a.energy - 4f64.ln()).abs() < 1e-6);
            assert!((a.pitch - b.pitch).abs() < 1e-6);
        }
    }

    #[test]
    fn prosody_of_silence() {
        let frames = prosody_frames(&[0.0; 4000], 16000, 25.0, 10.0).unwrap();
        for f in frames {
            assert_eq!(f.energy, ENERGY_FLOOR.ln());
            assert_eq!(f.pov, 0.0);
            assert_eq!(f.pitch, 0.0);
        }
        assert!(prosody_frames(&[0.0; 100], 16000, 25.0, 10.0).is_err());
        assert!(prosody_frames(&[0.0; 100000], 4000, 25.0, 10.0).is_err());
    }

    #[test]
    fn ndb_identical_sets_are_zero() {
        let a: Vec<f32> = (0..600).map(|i| ((i * 37) % 101) as f32 / 10.0).collect();
        let cfg = NdbConfig {
            k_bins: 10,
            repeats: 3,
            ..NdbConfig::default()
        };
        let r = ndb_js(&a, &a, 3, &cfg).unwrap();
        assert_eq!((r.ndb, r.js), (0.0, 0.0));
        assert_eq!(r.per_repeat.len(), 3);
        assert!(r.to_csv().starts_with("repeat,ndb,js\n1,0,0\n"));
        assert!(ndb_js(&a[..6], &a, 3, &cfg).is_err());
    }
}
