//! Residual vector quantizer with EMA codebooks.
//!
//! Layer `i` snaps the residual left by layers `1..i` to its nearest codeword.
//! The last entry of every codebook is a pinned zero vector (the null code), so
//! a layer can always decline to refine and the residual energy of each frame
//! never grows from one layer to the next.
//!
//! Bottleneck inputs and codewords are stored at f32 precision while residual
//! arithmetic runs in f64. Differences of f32 values with comparable exponents
//! are exact in f64, which makes `input == sum(q_i) + residual_N` hold bit for
//! bit rather than approximately.

use std::path::Path;

use musa_autograd::gemm;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::FrameRepresentation;
use crate::error::{MusaError, Result};
use crate::io::write_atomic;

/// Rounds to the storage precision of the bottleneck.
pub fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSettings {
    pub decay: f64,
    pub epsilon: f64,
    /// Steps without any assignment after which a code is re-seeded.
    pub dead_after: u32,
}

impl Default for EmaSettings {
    fn default() -> Self {
        Self {
            decay: 0.99,
            epsilon: 1e-5,
            dead_after: 200,
        }
    }
}

/// One `K x d` codebook with its EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub size: usize,
    /// Whether the last entry is the pinned zero vector.
    pub null_code: bool,
    pub embeddings: Vec<f64>,
    pub counts: Vec<f64>,
    pub sums: Vec<f64>,
    pub unused_steps: Vec<u32>,
    pub initialized: bool,
}

impl Codebook {
    pub fn zeros(size: usize, dim: usize, null_code: bool) -> Self {
        Self {
            dim,
            size,
            null_code,
            embeddings: vec![0.0; size * dim],
            counts: vec![1.0; size],
            sums: vec![0.0; size * dim],
            unused_steps: vec![0; size],
            initialized: false,
        }
    }

    /// Codebook with the given entries (rounded to storage precision).
    pub fn from_entries(size: usize, dim: usize, entries: &[f64], null_code: bool) -> Result<Self> {
        if entries.len() != size * dim {
            return Err(MusaError::DimensionMismatch {
                expected: size * dim,
                got: entries.len(),
            });
        }
        let mut cb = Self::zeros(size, dim, null_code);
        cb.embeddings = entries.iter().map(|&v| to_storage(v)).collect();
        if null_code {
            cb.embeddings[(size - 1) * dim..].iter_mut().for_each(|v| *v = 0.0);
        }
        cb.sums = cb.embeddings.clone();
        cb.initialized = true;
        Ok(cb)
    }

    /// Number of entries that learn; excludes the null code.
    pub fn trainable(&self) -> usize {
        self.size - usize::from(self.null_code)
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Nearest entry per row of `rows: [n, d]`, lowest index on ties.
    pub fn nearest(&self, rows: &[f64]) -> Vec<usize> {
        let d = self.dim;
        let n = rows.len() / d;
        let k = self.size;
        let mut dots = vec![0.0; n * k];
        gemm(n, d, k, rows, false, &self.embeddings, true, &mut dots, 0.0);
        let norms: Vec<f64> = self.embeddings.chunks(d).map(|e| e.iter().map(|v| v * v).sum()).collect();
        (0..n)
            .map(|i| {
                let row = &rows[i * d..(i + 1) * d];
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..k {
                    let dist = norms[j] - 2.0 * dots[i * k + j];
                    if dist < best_d {
                        best_d = dist;
                        best = j;
                    }
                }
                // The expanded distance can misorder near-ties by rounding, so
                // settle the final choice against the null code (and the exact
                // candidate distance) with direct sums.
                if self.null_code && best != k - 1 {
                    let exact = sq_dist(row, self.entry(best));
                    let null = row.iter().map(|v| v * v).sum::<f64>();
                    if null < exact {
                        best = k - 1;
                    }
                }
                best
            })
            .collect()
    }

    /// k-means initialization of the trainable entries from `rows: [n, d]`.
    /// With fewer rows than entries, entries are drawn with replacement and
    /// jittered so they do not coincide.
    pub fn init_kmeans(&mut self, rows: &[f64], iters: usize, rng: &mut impl Rng) {
        let d = self.dim;
        let n = rows.len() / d;
        let kt = self.trainable();
        if n == 0 {
            return;
        }
        let scale = (rows.iter().map(|v| v * v).sum::<f64>() / rows.len() as f64).sqrt().max(1e-6);
        let mut cent = vec![0.0; kt * d];
        if n <= kt {
            for c in 0..kt {
                let r = if c < n { c } else { rng.random_range(0..n) };
                for j in 0..d {
                    let jitter = if c < n { 0.0 } else { 1e-2 * scale * (rng.random::<f64>() - 0.5) };
                    cent[c * d + j] = rows[r * d + j] + jitter;
                }
            }
        } else {
            kmeans_pp(rows, d, kt, rng, &mut cent);
            lloyd(rows, d, kt, iters, &mut cent);
        }
        for (i, v) in cent.into_iter().enumerate() {
            self.embeddings[i] = to_storage(v);
        }
        self.sums = self.embeddings.clone();
        self.counts = vec![1.0; self.size];
        self.unused_steps = vec![0; self.size];
        self.initialized = true;
    }

    /// Folds one batch of assignments into the EMA statistics and refreshes
    /// the codewords. Entries idle for more than `dead_after` steps are
    /// re-seeded from random batch rows.
    pub fn ema_update(&mut self, rows: &[f64], codes: &[usize], ema: &EmaSettings, rng: &mut impl Rng) {
        let d = self.dim;
        let kt = self.trainable();
        let mut batch_counts = vec![0.0; kt];
        let mut batch_sums = vec![0.0; kt * d];
        for (i, &c) in codes.iter().enumerate() {
            if c >= kt {
                continue;
            }
            batch_counts[c] += 1.0;
            for j in 0..d {
                batch_sums[c * d + j] += rows[i * d + j];
            }
        }
        let g = ema.decay;
        for k in 0..kt {
            self.counts[k] = g * self.counts[k] + (1.0 - g) * batch_counts[k];
            for j in 0..d {
                self.sums[k * d + j] = g * self.sums[k * d + j] + (1.0 - g) * batch_sums[k * d + j];
            }
        }
        let total: f64 = self.counts[..kt].iter().sum();
        for k in 0..kt {
            let smoothed = if ema.epsilon > 0.0 {
                (self.counts[k] + ema.epsilon) / (total + kt as f64 * ema.epsilon) * total
            } else {
                self.counts[k]
            };
            if smoothed > 0.0 {
                for j in 0..d {
                    self.embeddings[k * d + j] = to_storage(self.sums[k * d + j] / smoothed);
                }
            }
            if batch_counts[k] > 0.0 {
                self.unused_steps[k] = 0;
            } else {
                self.unused_steps[k] = self.unused_steps[k].saturating_add(1);
            }
        }
        let n = codes.len();
        if n == 0 {
            return;
        }
        for k in 0..kt {
            if self.unused_steps[k] > ema.dead_after {
                let r = rng.random_range(0..n);
                for j in 0..d {
                    let v = to_storage(rows[r * d + j]);
                    self.embeddings[k * d + j] = v;
                    self.sums[k * d + j] = v;
                }
                self.counts[k] = 1.0;
                self.unused_steps[k] = 0;
            }
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding of `k` centroids from `rows: [n, d]` (requires `n >= k`).
pub(crate) fn kmeans_pp(rows: &[f64], d: usize, k: usize, rng: &mut impl Rng, cent: &mut [f64]) {
    let n = rows.len() / d;
    let first = rng.random_range(0..n);
    cent[..d].copy_from_slice(&rows[first * d..(first + 1) * d]);
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(&rows[i * d..(i + 1) * d], &cent[..d])).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    chosen = i;
                    break;
                }
                u -= b;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        cent[c * d..(c + 1) * d].copy_from_slice(&rows[pick * d..(pick + 1) * d]);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(&rows[i * d..(i + 1) * d], &cent[c * d..(c + 1) * d]));
        }
    }
}

/// Lloyd iterations; empty clusters keep their previous centroid.
pub(crate) fn lloyd(rows: &[f64], d: usize, k: usize, iters: usize, cent: &mut [f64]) {
    let n = rows.len() / d;
    for _ in 0..iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let row = &rows[i * d..(i + 1) * d];
            let c = (0..k)
                .min_by(|&a, &b| sq_dist(row, &cent[a * d..(a + 1) * d]).total_cmp(&sq_dist(row, &cent[b * d..(b + 1) * d])))
                .unwrap();
            counts[c] += 1;
            for j in 0..d {
                sums[c * d + j] += row[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    cent[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
}

/// Per-layer codes, `[N, t]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence {
    pub num_layers: usize,
    pub frames: usize,
    pub codebook_size: usize,
    pub codes: Vec<usize>,
}

impl CodeSequence {
    pub fn layer(&self, i: usize) -> &[usize] {
        &self.codes[i * self.frames..(i + 1) * self.frames]
    }

    /// `.codes` sidecar: little-endian u32 N, K, t, then N*t u16 indices.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 2 * self.codes.len());
        for v in [self.num_layers, self.codebook_size, self.frames] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &c in &self.codes {
            out.extend_from_slice(&(c as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| MusaError::InvalidInput(format!("codes file: {m}"));
        if b.len() < 12 {
            return Err(bad("truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]) as usize;
        let (num_layers, codebook_size, frames) = (word(0), word(4), word(8));
        if b.len() != 12 + 2 * num_layers * frames {
            return Err(bad("payload length does not match header"));
        }
        let codes: Vec<usize> = b[12..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
        if let Some(&c) = codes.iter().find(|&&c| c >= codebook_size) {
            return Err(MusaError::TokenOutOfRange {
                token: c,
                classes: codebook_size,
            });
        }
        Ok(Self {
            num_layers,
            frames,
            codebook_size,
            codes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Everything one quantizer pass produces, frame-major (`[n, d]` buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct RvqOutput {
    pub rows: usize,
    pub dim: usize,
    /// `codes[i][r]`: code of row `r` at layer `i`.
    pub codes: Vec<Vec<usize>>,
    pub quantized: Vec<Vec<f64>>,
    /// Residual entering each layer; entry 0 is the (storage-rounded) input.
    pub residual_inputs: Vec<Vec<f64>>,
    pub final_residual: Vec<f64>,
    pub total: Vec<f64>,
}

impl RvqOutput {
    /// `‖input − Σ_{i<m} q_i‖²` of every row for m = 0..=N.
    pub fn residual_energies(&self, row: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out: Vec<f64> = self
            .residual_inputs
            .iter()
            .map(|r| r[row * d..(row + 1) * d].iter().map(|v| v * v).sum())
            .collect();
        out.push(self.final_residual[row * d..(row + 1) * d].iter().map(|v| v * v).sum());
        out
    }
}

/// Per-layer quantized matrices `q_i` (each `d x t`) and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRepresentation {
    pub layers: Vec<FrameRepresentation>,
    pub total: FrameRepresentation,
    pub residual: FrameRepresentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerBank {
    pub layers: Vec<Codebook>,
    pub ema: EmaSettings,
}

impl QuantizerBank {
    pub fn new(num_layers: usize, size: usize, dim: usize, ema: EmaSettings) -> Self {
        Self {
            layers: (0..num_layers).map(|_| Codebook::zeros(size, dim, true)).collect(),
            ema,
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim
    }

    pub fn codebook_size(&self) -> usize {
        self.layers[0].size
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| l.initialized)
    }

    /// Quantizes frame-major rows `[n, d]`.
    pub fn quantize_rows(&self, rows: &[f64]) -> Result<RvqOutput> {
        let d = self.dim();
        if rows.len() % d != 0 {
            return Err(MusaError::DimensionMismatch {
                expected: d,
                got: rows.len() % d,
            });
        }
        let n = rows.len() / d;
        let mut residual: Vec<f64> = rows.iter().map(|&v| to_storage(v)).collect();
        let mut total = vec![0.0; rows.len()];
        let mut out = RvqOutput {
            rows: n,
            dim: d,
            codes: Vec::with_capacity(self.layers.len()),
            quantized: Vec::with_capacity(self.layers.len()),
            residual_inputs: Vec::with_capacity(self.layers.len()),
            final_residual: Vec::new(),
            total: Vec::new(),
        };
        for cb in &self.layers {
            let codes = cb.nearest(&residual);
            let mut q = vec![0.0; rows.len()];
            for (r, &c) in codes.iter().enumerate() {
                q[r * d..(r + 1) * d].copy_from_slice(cb.entry(c));
            }
            let next: Vec<f64> = residual.iter().zip(&q).map(|(a, b)| a - b).collect();
            for (t, v) in total.iter_mut().zip(&q) {
                *t += v;
            }
            out.residual_inputs.push(std::mem::replace(&mut residual, next));
            out.codes.push(codes);
            out.quantized.push(q);
        }
        out.final_residual = residual;
        out.total = total;
        Ok(out)
    }

    pub fn quantize(&self, r1: &FrameRepresentation) -> Result<(CodeSequence, QuantizedRepresentation)> {
        if r1.dim != self.dim() {
            return Err(MusaError::DimensionMismatch {
                expected: self.dim(),
                got: r1.dim,
            });
        }
        let out = self.quantize_rows(&r1.to_frames())?;
        let t = r1.frames;
        let to_rep = |rows: &[f64]| FrameRepresentation::from_frames(r1.dim, t, rows, r1.source_length);
        let codes = CodeSequence {
            num_layers: self.num_layers(),
            frames: t,
            codebook_size: self.codebook_size(),
            codes: out.codes.concat(),
        };
        let rep = QuantizedRepresentation {
            layers: out.quantized.iter().map(|q| to_rep(q)).collect::<Result<_>>()?,
            total: to_rep(&out.total)?,
            residual: to_rep(&out.final_residual)?,
        };
        Ok((codes, rep))
    }

    /// Sum of the codewords selected by `codes`, as `d x t` covering
    /// `t * hop` samples.
    pub fn decode_codes(&self, codes: &CodeSequence, hop: usize) -> Result<FrameRepresentation> {
        if codes.num_layers != self.num_layers() || codes.codebook_size != self.codebook_size() {
            return Err(MusaError::InvalidInput(format!(
                "codes for {} layers x {} entries do not fit a {} x {} bank",
                codes.num_layers,
                codes.codebook_size,
                self.num_layers(),
                self.codebook_size()
            )));
        }
        let d = self.dim();
        let mut rows = vec![0.0; codes.frames * d];
        for (i, cb) in self.layers.iter().enumerate() {
            for (j, &c) in codes.layer(i).iter().enumerate() {
                for (v, e) in rows[j * d..(j + 1) * d].iter_mut().zip(cb.entry(c)) {
                    *v += e;
                }
            }
        }
        FrameRepresentation::from_frames(d, codes.frames, &rows, codes.frames * hop)
    }

    /// Layer-by-layer k-means on the residuals of `rows`.
    pub fn init_kmeans(&mut self, rows: &[f64], rng: &mut impl Rng) {
        let d = self.dim();
        let mut residual: Vec<f64> = rows.iter().map(|&v| to_storage(v)).collect();
        for cb in &mut self.layers {
            cb.init_kmeans(&residual, 10, rng);
            let codes = cb.nearest(&residual);
            for (r, &c) in codes.iter().enumerate() {
                for j in 0..d {
                    residual[r * d + j] -= cb.embeddings[c * d + j];
                }
            }
        }
    }

    /// EMA update of every layer from one quantizer pass.
    pub fn ema_update(&mut self, out: &RvqOutput, rng: &mut impl Rng) {
        let ema = self.ema;
        for (i, cb) in self.layers.iter_mut().enumerate() {
            cb.ema_update(&out.residual_inputs[i], &out.codes[i], &ema, rng);
        }
    }
}

/// `Σ_i Σ_frames ‖x_i − q_i‖² / frames` over aligned `[n, d]` buffers.
pub fn commitment_loss(inputs: &[Vec<f64>], quantized: &[Vec<f64>], dim: usize) -> Result<f64> {
    if inputs.len() != quantized.len() {
        return Err(MusaError::LengthMismatch {
            left: inputs.len(),
            right: quantized.len(),
        });
    }
    let mut total = 0.0;
    let mut frames = None;
    for (x, q) in inputs.iter().zip(quantized) {
        if x.len() != q.len() || x.len() % dim != 0 {
            return Err(MusaError::LengthMismatch {
                left: x.len(),
                right: q.len(),
            });
        }
        let n = x.len() / dim;
        if *frames.get_or_insert(n) != n {
            return Err(MusaError::LengthMismatch {
                left: frames.unwrap_or(0),
                right: n,
            });
        }
        total += sq_dist(x, q);
    }
    Ok(match frames {
        Some(n) if n > 0 => total / n as f64,
        _ => 0.0,
    })
}

/// Mean cross-entropy of `[t, k]` logits against per-frame tokens.
pub fn semantic_distillation_loss(logits: &[f64], k: usize, tokens: &[usize]) -> Result<f64> {
    if logits.len() != k * tokens.len() {
        return Err(MusaError::LengthMismatch {
            left: logits.len() / k.max(1),
            right: tokens.len(),
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= k) {
        return Err(MusaError::TokenOutOfRange { token: t, classes: k });
    }
    if tokens.is_empty() {
        return Err(MusaError::InsufficientData("no frames".into()));
    }
    let logp = musa_autograd::log_softmax_rows(logits, k);
    Ok(-tokens.iter().enumerate().map(|(i, &t)| logp[i * k + t]).sum::<f64>() / tokens.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn null_code_is_last_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = Codebook::zeros(4, 2, true);
        cb.init_kmeans(&[1.0, 1.0, 2.0, 2.0, -1.0, 0.5], 5, &mut rng);
        assert_eq!(cb.entry(3), &[0.0, 0.0]);
        // A row closer to zero than to any learned entry picks the null code.
        assert_eq!(cb.nearest(&[0.01, -0.01]), vec![3]);
    }

    #[test]
    fn ema_without_memory_jumps_to_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = Codebook::from_entries(3, 2, &[0.0, 0.0, 5.0, 5.0, 0.0, 0.0], true).unwrap();
        let rows = [1.0, 2.0, 3.0, 4.0];
        let ema = EmaSettings {
            decay: 0.0,
            epsilon: 0.0,
            dead_after: 100,
        };
        cb.ema_update(&rows, &[0, 0], &ema, &mut rng);
        assert_eq!(cb.entry(0), &[2.0, 3.0]);
        // Entry 1 had no assignments and zero memory: it keeps its value.
        assert_eq!(cb.entry(1), &[5.0, 5.0]);
    }

    #[test]
    fn dead_codes_are_reseeded_from_batch_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = Codebook::from_entries(3, 1, &[0.0, 100.0, 0.0], true).unwrap();
        let ema = EmaSettings {
            decay: 0.9,
            epsilon: 1e-5,
            dead_after: 2,
        };
        for _ in 0..3 {
            cb.ema_update(&[0.5], &[0], &ema, &mut rng);
        }
        assert_eq!(cb.entry(1), &[0.5]);
        assert_eq!(cb.unused_steps[1], 0);
    }

    #[test]
    fn codes_file_round_trip() {
        let c = CodeSequence {
            num_layers: 2,
            frames: 3,
            codebook_size: 1024,
            codes: vec![0, 1, 1023, 5, 6, 7],
        };
        assert_eq!(CodeSequence::from_bytes(&c.to_bytes()).unwrap(), c);
        assert!(CodeSequence::from_bytes(&c.to_bytes()[..13]).is_err());
    }

    #[test]
    fn semantic_loss_guards() {
        assert!(matches!(semantic_distillation_loss(&[0.0; 4], 2, &[0, 2]), Err(MusaError::TokenOutOfRange { .. })));
        assert!(matches!(semantic_distillation_loss(&[0.0; 4], 2, &[0]), Err(MusaError::LengthMismatch { .. })));
    }
}
