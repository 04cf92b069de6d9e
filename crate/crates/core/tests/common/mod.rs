//! Shared test support: fixture paths, a tiny model profile and brute-force
//! reference implementations of the metrics.

#![allow(dead_code)]

pub mod grad;

use std::collections::HashMap;
use std::path::PathBuf;

use musa_core::config::MusaConfig;
use musa_core::data::{Dataset, Manifest};
use musa_core::metrics::{SimilarityMatrix, TrialScore};
use musa_core::model::{MusaModel, TrainBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn toy_manifest() -> PathBuf {
    fixtures().join("toy").join("manifest.tsv")
}

/// A generator of well under a thousand scalars: latent 4, hop 4.
pub fn tiny_config() -> MusaConfig {
    let mut c = MusaConfig::toy();
    let m = &mut c.model;
    m.latent_dim = 4;
    m.encoder_channels = 1;
    m.strides = vec![2, 2];
    m.lstm_layers = 1;
    m.speaker_channels = vec![1];
    m.speaker_freq_stride = 8;
    m.num_quantizers = 2;
    m.codebook_size = 8;
    m.disc_channels = 1;
    m.mpd_periods = vec![2];
    m.msd_scales = 1;
    m.stft_ffts = vec![16];
    c.teacher.tokenizer_codebook_size = 4;
    c
}

pub fn toy_dataset() -> Dataset {
    Dataset::load(&Manifest::load(&toy_manifest()).unwrap()).unwrap()
}

/// Two short crops (one per toy speaker) with 1024-sample speaker segments
/// and arbitrary but fixed tokens.
pub fn tiny_batch(model: &MusaModel, crop: usize) -> TrainBatch {
    let data = toy_dataset();
    let k = model.bank.codebook_size();
    let t = crop / model.hop();
    let mut batch = TrainBatch {
        crops: Vec::new(),
        seg1: Vec::new(),
        seg2: Vec::new(),
        labels: Vec::new(),
        tokens: Vec::new(),
    };
    for (i, u) in [&data.utterances[0], &data.utterances[5]].into_iter().enumerate() {
        let x = u.wave.samples();
        batch.crops.push(x[2000..2000 + crop].to_vec());
        batch.seg1.push(x[0..1024].to_vec());
        batch.seg2.push(x[3000..4024].to_vec());
        batch.labels.push(u.speaker);
        batch.tokens.push((0..t).map(|j| (j * 3 + i) % k).collect());
    }
    batch
}

/// A tiny-profile model whose codebooks are initialized from `batch`.
pub fn tiny_model(seed: u64) -> (MusaModel, TrainBatch) {
    let c = tiny_config();
    let mut model = MusaModel::new(&c.model, 2, seed).unwrap();
    let batch = tiny_batch(&model, 64);
    let rows = model.latent_rows(&batch).unwrap();
    model.bank.init_kmeans(&rows, &mut ChaCha8Rng::seed_from_u64(seed));
    (model, batch)
}

/// Rates at every distinct score by direct counting, then the crossing of
/// the FAR/FRR polyline with the diagonal. Above the top score the curve
/// ends at FAR 0, FRR 1.
pub fn eer_oracle(trials: &[TrialScore]) -> (f64, f64) {
    let mut th: Vec<f64> = trials.iter().map(|t| t.score).collect();
    th.sort_by(|a, b| a.partial_cmp(b).unwrap());
    th.dedup();
    let nt = trials.iter().filter(|t| t.is_target).count() as f64;
    let nn = trials.len() as f64 - nt;
    let mut pts: Vec<(Option<f64>, f64, f64)> = Vec::new();
    for &x in &th {
        let mut fa = 0.0;
        let mut fr = 0.0;
        for t in trials {
            if t.is_target && t.score < x {
                fr += 1.0;
            }
            if !t.is_target && t.score >= x {
                fa += 1.0;
            }
        }
        pts.push((Some(x), fa / nn, fr / nt));
    }
    pts.push((None, 0.0, 1.0));
    for k in 0..pts.len() - 1 {
        let (t0, x0, y0) = pts[k];
        let (t1, x1, y1) = pts[k + 1];
        if y1 - x1 >= 0.0 {
            let den = (y1 - y0) - (x1 - x0);
            let a = if den == 0.0 { 0.0 } else { (x0 - y0) / den };
            let eer = x0 + a * (x1 - x0);
            let thr = match t1 {
                Some(t1) => t0.unwrap() + a * (t1 - t0.unwrap()),
                None => t0.unwrap(),
            };
            return (eer, thr);
        }
    }
    unreachable!("the polyline always ends above the diagonal")
}

/// Plain recursive edit distance with memoization.
pub fn edit_distance(r: &[String], h: &[String]) -> usize {
    fn go(r: &[String], h: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == r.len() {
            return h.len() - j;
        }
        if j == h.len() {
            return r.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if r[i] == h[j] {
            go(r, h, i + 1, j + 1, memo)
        } else {
            1 + go(r, h, i + 1, j + 1, memo)
                .min(go(r, h, i + 1, j, memo))
                .min(go(r, h, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(r, h, 0, 0, &mut HashMap::new())
}

/// Mean product of z-scores.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let z = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
        v.iter().map(|a| (a - m) / sd).collect::<Vec<_>>()
    };
    z(x).iter().zip(z(y)).map(|(a, b)| a * b).sum::<f64>() / n
}

/// Enumerates every utterance pair of the flattened corpus and averages the
/// admissible ones per speaker cell.
pub fn similarity_oracle(speakers: &[usize], n_speakers: usize, score: &dyn Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut sum = vec![0.0; n_speakers * n_speakers];
    let mut cnt = vec![0.0; n_speakers * n_speakers];
    for (a, &sa) in speakers.iter().enumerate() {
        for (b, &sb) in speakers.iter().enumerate() {
            if a == b {
                continue;
            }
            sum[sa * n_speakers + sb] += score(a, b);
            cnt[sa * n_speakers + sb] += 1.0;
        }
    }
    sum.iter().zip(&cnt).map(|(s, c)| 1.0 / (1.0 + (-s / c).exp())).collect()
}

/// Diagonal mean from the trace, off-diagonal mean from the remainder.
pub fn dominance_oracle(m: &SimilarityMatrix) -> f64 {
    let n = m.n();
    let trace: f64 = (0..n).map(|i| m.values[i * n + i]).sum();
    let total: f64 = m.values.iter().sum();
    (trace / n as f64 - (total - trace) / (n * n - n) as f64).abs()
}

pub fn gvd_oracle(oo: &SimilarityMatrix, aa: &SimilarityMatrix) -> f64 {
    10.0 * (dominance_oracle(aa) / dominance_oracle(oo)).ln() / std::f64::consts::LN_10
}

/// Plain Lloyd k-means with k-means++ seeding, best of `restarts`.
pub struct KMeans {
    pub dim: usize,
    pub centroids: Vec<f64>,
}

impl KMeans {
    fn nearest(&self, row: &[f64]) -> (usize, f64) {
        self.centroids
            .chunks(self.dim)
            .map(|c| c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, e)| if e < best.1 { (i, e) } else { best })
    }

    /// Mean squared error per element.
    pub fn mse(&self, rows: &[f64]) -> f64 {
        rows.chunks(self.dim).map(|r| self.nearest(r).1).sum::<f64>() / rows.len() as f64
    }
}

pub fn kmeans_oracle(rows: &[f64], d: usize, k: usize, restarts: usize, seed: u64) -> KMeans {
    use rand::Rng;
    let n = rows.len() / d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, KMeans)> = None;
    for _ in 0..restarts {
        let mut km = KMeans {
            dim: d,
            centroids: rows[rng.random_range(0..n) * d..][..d].to_vec(),
        };
        while km.centroids.len() < k * d {
            let dist: Vec<f64> = rows.chunks(d).map(|r| km.nearest(r).1).collect();
            let total: f64 = dist.iter().sum();
            let mut pick = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if pick < w {
                    idx = i;
                    break;
                }
                pick -= w;
            }
            km.centroids.extend_from_slice(&rows[idx * d..(idx + 1) * d]);
        }
        for _ in 0..100 {
            let mut sums = vec![0.0; k * d];
            let mut counts = vec![0usize; k];
            for r in rows.chunks(d) {
                let c = km.nearest(r).0;
                counts[c] += 1;
                sums[c * d..(c + 1) * d].iter_mut().zip(r).for_each(|(s, v)| *s += v);
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for j in 0..d {
                        km.centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                    }
                }
            }
        }
        let err = km.mse(rows);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, km));
        }
    }
    best.expect("at least one restart").1
}
