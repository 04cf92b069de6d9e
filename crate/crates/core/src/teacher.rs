//! Semantic teacher: where the per-frame token targets for the first
//! quantizer come from.
//!
//! A [`TeacherProvider`] yields feature sequences, either computed from the
//! waveform ([`SyntheticTeacher`], banded log-mel averages at 50 Hz) or read
//! from precomputed files ([`PrecomputedTeacher`]). A [`Tokenizer`], a
//! single-quantizer codec (linear down-projection, EMA codebook, linear
//! up-projection), turns features into tokens.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use musa_autograd::spectral::{MelPlan, SpectralPlan};
use musa_autograd::{AdamW, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::dsp::{Waveform, MEL_FLOOR, MEL_N_FFT, N_MELS, SAMPLE_RATE};
use crate::error::{MusaError, Result};
use crate::io::write_atomic;
use crate::rvq::{kmeans_pp, lloyd, sq_dist, Codebook, EmaSettings};

/// Frame hop of the synthetic teacher, matching the codec's 50 Hz frames.
pub const TEACHER_HOP: usize = 320;
pub const TEACHER_RATE: f64 = SAMPLE_RATE as f64 / TEACHER_HOP as f64;
/// Mel bins averaged into each synthetic feature band.
const BAND_WIDTH: usize = 4;
pub const SYNTHETIC_DIM: usize = N_MELS / BAND_WIDTH;

/// Frame-major `[frames, dim]` teacher features.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatureSequence {
    pub dim: usize,
    pub frames: usize,
    pub frame_rate: f64,
    pub values: Vec<f64>,
}

impl TeacherFeatureSequence {
    pub fn new(dim: usize, frames: usize, frame_rate: f64, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(MusaError::InsufficientData("teacher features need at least one frame".into()));
        }
        if values.len() != dim * frames {
            return Err(MusaError::DimensionMismatch {
                expected: dim * frames,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MusaError::InvalidInput("non-finite teacher feature".into()));
        }
        Ok(Self {
            dim,
            frames,
            frame_rate,
            values,
        })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub classes: usize,
    pub frame_rate_mhz: u64,
}

impl TokenSequence {
    pub fn frame_rate(&self) -> f64 {
        self.frame_rate_mhz as f64 / 1000.0
    }
}

fn synthetic_plan() -> Arc<MelPlan> {
    static PLAN: OnceLock<Arc<MelPlan>> = OnceLock::new();
    PLAN.get_or_init(|| {
        Arc::new(MelPlan::new(
            SpectralPlan::hann(MEL_N_FFT, TEACHER_HOP),
            N_MELS,
            SAMPLE_RATE as f64,
            0.0,
            SAMPLE_RATE as f64 / 2.0,
            MEL_FLOOR,
        ))
    })
    .clone()
}

/// `floor(len / 320)` frames of 20 banded log-mel averages, each frame taken
/// from a 1024-sample window centred on its 320-sample span.
pub fn synthetic_teacher(w: &Waveform) -> Result<TeacherFeatureSequence> {
    let frames = w.len() / TEACHER_HOP;
    if frames == 0 {
        return Err(MusaError::TooShort {
            needed: TEACHER_HOP,
            got: w.len(),
        });
    }
    let left = MEL_N_FFT / 2 - TEACHER_HOP / 2;
    let needed = (frames - 1) * TEACHER_HOP + MEL_N_FFT;
    let mut padded = vec![0.0; needed.max(left + w.len())];
    padded[left..left + w.len()].copy_from_slice(w.samples());
    let (mel, mel_frames) = synthetic_plan().log_mel(&padded).expect("padded to at least one window");
    let mut values = Vec::with_capacity(frames * SYNTHETIC_DIM);
    for f in 0..frames {
        for b in 0..SYNTHETIC_DIM {
            let s: f64 = (0..BAND_WIDTH).map(|k| mel[(b * BAND_WIDTH + k) * mel_frames + f]).sum();
            values.push(s / BAND_WIDTH as f64);
        }
    }
    TeacherFeatureSequence::new(SYNTHETIC_DIM, frames, TEACHER_RATE, values)
}

/// Anything that can supply teacher features for an utterance.
pub trait TeacherProvider: Send + Sync {
    fn features(&self, utt_id: &str, w: &Waveform) -> Result<TeacherFeatureSequence>;
    fn dim(&self) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticTeacher;

impl TeacherProvider for SyntheticTeacher {
    fn features(&self, _utt_id: &str, w: &Waveform) -> Result<TeacherFeatureSequence> {
        synthetic_teacher(w)
    }

    fn dim(&self) -> usize {
        SYNTHETIC_DIM
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureManifestEntry {
    pub utt_id: String,
    pub dim: usize,
    pub frames: usize,
    pub frame_rate: f64,
}

/// Features from `manifest.json` plus one `<utt_id>.f32` file per utterance
/// (little-endian f32, frame-major).
#[derive(Debug, Clone)]
pub struct PrecomputedTeacher {
    dir: PathBuf,
    entries: HashMap<String, FeatureManifestEntry>,
    dim: usize,
}

impl PrecomputedTeacher {
    pub const MANIFEST: &'static str = "manifest.json";

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::MANIFEST);
        let text = crate::io::read_to_string(&path)?;
        let list: Vec<FeatureManifestEntry> = serde_json::from_str(&text)?;
        let dim = list
            .first()
            .map(|e| e.dim)
            .ok_or_else(|| MusaError::InsufficientData(format!("{} lists no utterances", path.display())))?;
        if let Some(e) = list.iter().find(|e| e.dim != dim) {
            return Err(MusaError::DimensionMismatch { expected: dim, got: e.dim });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: list.into_iter().map(|e| (e.utt_id.clone(), e)).collect(),
            dim,
        })
    }

    /// Writes features in the layout [`PrecomputedTeacher::open`] reads.
    pub fn write(dir: &Path, items: &[(String, TeacherFeatureSequence)]) -> Result<()> {
        let mut manifest = Vec::with_capacity(items.len());
        for (id, f) in items {
            let bytes: Vec<u8> = f.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            write_atomic(&dir.join(format!("{id}.f32")), &bytes)?;
            manifest.push(FeatureManifestEntry {
                utt_id: id.clone(),
                dim: f.dim,
                frames: f.frames,
                frame_rate: f.frame_rate,
            });
        }
        write_atomic(&dir.join(Self::MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
    }
}

impl TeacherProvider for PrecomputedTeacher {
    fn features(&self, utt_id: &str, _w: &Waveform) -> Result<TeacherFeatureSequence> {
        let e = self
            .entries
            .get(utt_id)
            .ok_or_else(|| MusaError::InvalidInput(format!("no precomputed teacher features for {utt_id}")))?;
        let path = self.dir.join(format!("{utt_id}.f32"));
        let bytes = std::fs::read(&path).map_err(|err| MusaError::io(&path, err))?;
        if bytes.len() != e.dim * e.frames * 4 {
            return Err(MusaError::DimensionMismatch {
                expected: e.dim * e.frames * 4,
                got: bytes.len(),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        TeacherFeatureSequence::new(e.dim, e.frames, e.frame_rate, values)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Nearest-neighbour resampling of `tokens` (at `src_rate` Hz) onto `t` codec
/// frames at `dst_rate` Hz, the first codec frame starting `offset_secs` into
/// the token timeline. Each codec frame takes the token whose frame contains
/// its centre.
pub fn align_tokens(tokens: &[usize], src_rate: f64, offset_secs: f64, t: usize, dst_rate: f64) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(MusaError::LengthMismatch { left: 0, right: t });
    }
    Ok((0..t)
        .map(|j| {
            let centre = offset_secs + (j as f64 + 0.5) / dst_rate;
            let idx = (centre * src_rate).floor().max(0.0) as usize;
            tokens[idx.min(tokens.len() - 1)]
        })
        .collect())
}

/// Single-quantizer codec over teacher features.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub in_dim: usize,
    pub latent_dim: usize,
    /// `[latent, in]` row-major, then bias `[latent]`.
    pub down_w: Vec<f64>,
    pub down_b: Vec<f64>,
    /// `[in, latent]` row-major, then bias `[in]`.
    pub up_w: Vec<f64>,
    pub up_b: Vec<f64>,
    pub codebook: Codebook,
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn affine(w: &[f64], b: &[f64], rows: &[f64], in_dim: usize) -> Vec<f64> {
    let out_dim = b.len();
    let n = rows.len() / in_dim;
    let mut y = vec![0.0; n * out_dim];
    musa_autograd::gemm(n, in_dim, out_dim, rows, false, w, true, &mut y, 0.0);
    for row in y.chunks_mut(out_dim) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

impl Tokenizer {
    pub const MAGIC: &'static [u8; 8] = b"MUSATOKN";
    pub const VERSION: u32 = 1;

    /// Identity projections around the given `[K, dim]` codebook.
    pub fn with_identity(dim: usize, codebook: &[f64]) -> Result<Self> {
        let k = codebook.len() / dim.max(1);
        Ok(Self {
            in_dim: dim,
            latent_dim: dim,
            down_w: identity(dim),
            down_b: vec![0.0; dim],
            up_w: identity(dim),
            up_b: vec![0.0; dim],
            codebook: Codebook::from_entries(k, dim, codebook, false)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.codebook.size
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.in_dim {
            return Err(MusaError::DimensionMismatch {
                expected: self.in_dim,
                got: dim,
            });
        }
        Ok(())
    }

    pub fn encode_rows(&self, rows: &[f64]) -> Vec<f64> {
        affine(&self.down_w, &self.down_b, rows, self.in_dim)
    }

    pub fn tokenize(&self, features: &TeacherFeatureSequence) -> Result<TokenSequence> {
        self.check_dim(features.dim)?;
        Ok(TokenSequence {
            tokens: self.codebook.nearest(&self.encode_rows(&features.values)),
            classes: self.classes(),
            frame_rate_mhz: (features.frame_rate * 1000.0).round() as u64,
        })
    }

    /// Reconstruction of frame-major rows through the quantized bottleneck.
    pub fn reconstruct_rows(&self, rows: &[f64]) -> Vec<f64> {
        let codes = self.codebook.nearest(&self.encode_rows(rows));
        let q: Vec<f64> = codes.iter().flat_map(|&c| self.codebook.entry(c).to_vec()).collect();
        affine(&self.up_w, &self.up_b, &q, self.latent_dim)
    }

    /// Mean squared error per element over frame-major rows.
    pub fn mse(&self, rows: &[f64]) -> f64 {
        let r = self.reconstruct_rows(rows);
        sq_dist(rows, &r) / rows.len().max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::json!({
            "in_dim": self.in_dim,
            "latent_dim": self.latent_dim,
            "codebook_size": self.codebook.size,
        });
        let l = self.latent_dim;
        let i = self.in_dim;
        let k = self.codebook.size;
        let tensors = vec![
            ("down_w".to_string(), Tensor::new(vec![l, i], self.down_w.clone())),
            ("down_b".to_string(), Tensor::new(vec![l], self.down_b.clone())),
            ("up_w".to_string(), Tensor::new(vec![i, l], self.up_w.clone())),
            ("up_b".to_string(), Tensor::new(vec![i], self.up_b.clone())),
            ("codebook".to_string(), Tensor::new(vec![k, l], self.codebook.embeddings.clone())),
        ];
        container::encode(Self::MAGIC, Self::VERSION, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(Self::MAGIC, Self::VERSION, bytes)?;
        let field = |k: &str| {
            c.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| MusaError::CorruptCheckpoint(format!("missing {k}")))
        };
        let (in_dim, latent_dim, k) = (field("in_dim")?, field("latent_dim")?, field("codebook_size")?);
        let codebook = Codebook::from_entries(k, latent_dim, c.tensor("codebook")?.data(), false)?;
        Ok(Self {
            in_dim,
            latent_dim,
            down_w: c.tensor("down_w")?.data().to_vec(),
            down_b: c.tensor("down_b")?.data().to_vec(),
            up_w: c.tensor("up_w")?.data().to_vec(),
            up_b: c.tensor("up_b")?.data().to_vec(),
            codebook,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| MusaError::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerTrainConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// k-means++ restarts used for the codebook initialization.
    pub restarts: usize,
    pub seed: u64,
}

impl TokenizerTrainConfig {
    pub fn from_config(c: &crate::config::MusaConfig, in_dim: usize) -> Self {
        Self {
            codebook_size: c.teacher.tokenizer_codebook_size,
            latent_dim: c.teacher.tokenizer_dim.min(in_dim),
            epochs: c.teacher.tokenizer_epochs,
            batch: c.teacher.tokenizer_batch,
            lr: c.teacher.tokenizer_lr,
            restarts: 4,
            seed: c.training.seed,
        }
    }
}

const COMMIT_BETA: f64 = 0.25;
const LLOYD_POLISH: usize = 50;

/// Best of several k-means++ plus Lloyd runs, by training distortion.
fn best_kmeans(rows: &[f64], d: usize, k: usize, restarts: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..restarts.max(1) {
        let mut cent = vec![0.0; k * d];
        kmeans_pp(rows, d, k, rng, &mut cent);
        lloyd(rows, d, k, LLOYD_POLISH, &mut cent);
        let err = distortion(rows, d, &cent);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, cent));
        }
    }
    best.expect("at least one restart").1
}

fn distortion(rows: &[f64], d: usize, cent: &[f64]) -> f64 {
    rows.chunks(d)
        .map(|r| cent.chunks(d).map(|c| sq_dist(r, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Trains the codec on all frames of `corpus`.
///
/// The codebook starts from the best of several k-means++ runs in the latent
/// space. Minibatch training then updates the projections by gradient descent
/// (straight-through estimator, MSE plus commitment) and the codebook by EMA,
/// re-seeding codes that fall idle. A closing Lloyd pass and a least-squares
/// refit of the up-projection settle the result, and the trained codec is kept
/// only if it reconstructs the training frames at least as well as its
/// starting point.
pub fn train_tokenizer(corpus: &[TeacherFeatureSequence], cfg: &TokenizerTrainConfig) -> Result<Tokenizer> {
    let first = corpus.first().ok_or_else(|| MusaError::InsufficientData("empty tokenizer corpus".into()))?;
    let d = first.dim;
    if let Some(f) = corpus.iter().find(|f| f.dim != d) {
        return Err(MusaError::DimensionMismatch { expected: d, got: f.dim });
    }
    let rows: Vec<f64> = corpus.iter().flat_map(|f| f.values.iter().copied()).collect();
    let n = rows.len() / d;
    let k = cfg.codebook_size;
    if k == 0 || n < k {
        return Err(MusaError::InsufficientData(format!("{n} frames cannot train {k} codes")));
    }
    let l = cfg.latent_dim.clamp(1, d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Projections start as the identity, or as random orthonormal rows when
    // the latent space is narrower than the features.
    let down_w = if l == d { identity(d) } else { orthonormal_rows(l, d, &mut rng) };
    let mut up_w = vec![0.0; d * l];
    for i in 0..l {
        for j in 0..d {
            up_w[j * l + i] = down_w[i * d + j];
        }
    }
    let mut start = Tokenizer {
        in_dim: d,
        latent_dim: l,
        down_w,
        down_b: vec![0.0; l],
        up_w,
        up_b: vec![0.0; d],
        codebook: Codebook::zeros(k, l, false),
    };
    let latent = start.encode_rows(&rows);
    let cent = best_kmeans(&latent, l, k, cfg.restarts, &mut rng);
    start.codebook = Codebook::from_entries(k, l, &cent, false)?;
    refit_up(&mut start, &rows);
    let start_mse = start.mse(&rows);

    let mut tok = start.clone();
    let mut store = ParamStore::new();
    let dw = store.add("down_w", Tensor::new(vec![l, d], tok.down_w.clone()));
    let db = store.add("down_b", Tensor::new(vec![l], tok.down_b.clone()));
    let uw = store.add("up_w", Tensor::new(vec![d, l], tok.up_w.clone()));
    let ub = store.add("up_b", Tensor::new(vec![d], tok.up_b.clone()));
    let mut opt = AdamW::new(&store, cfg.lr, 0.9, 0.999, 0.0);
    let ema = EmaSettings {
        decay: 0.9,
        epsilon: 1e-5,
        dead_after: 20,
    };
    let batch = cfg.batch.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb: Vec<f64> = chunk.iter().flat_map(|&i| rows[i * d..(i + 1) * d].iter().copied()).collect();
            let g = Graph::new();
            let p = store.bind(&g, true);
            let x = g.constant(Tensor::new(vec![chunk.len(), d], xb.clone()));
            let z = x.linear(p[dw], Some(p[db]));
            let zv = z.value();
            let codes = tok.codebook.nearest(zv.data());
            let q: Vec<f64> = codes.iter().flat_map(|&c| tok.codebook.entry(c).to_vec()).collect();
            let q = Tensor::new(vec![chunk.len(), l], q);
            let st = z.add(g.constant(q.zip_map(&zv, |a, b| a - b)));
            let recon = st.linear(p[uw], Some(p[ub])).sub(x).square().mean();
            let commit = z.sub(g.constant(q)).square().mean();
            let loss = recon.add(commit.scale(COMMIT_BETA));
            let grads = g.backward(loss);
            let gs = store.collect_grads(&p, &grads);
            opt.update(&mut store, &gs);
            tok.codebook.ema_update(zv.data(), &codes, &ema, &mut rng);
        }
    }
    tok.down_w = store.get(dw).data().to_vec();
    tok.down_b = store.get(db).data().to_vec();
    tok.up_w = store.get(uw).data().to_vec();
    tok.up_b = store.get(ub).data().to_vec();
    // Closing Lloyd pass in the trained latent space.
    let latent = tok.encode_rows(&rows);
    let mut cent = tok.codebook.embeddings.clone();
    lloyd(&latent, l, k, LLOYD_POLISH, &mut cent);
    tok.codebook = Codebook::from_entries(k, l, &cent, false)?;
    refit_up(&mut tok, &rows);

    Ok(if tok.mse(&rows) <= start_mse { tok } else { start })
}

fn orthonormal_rows(l: usize, d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut w: Vec<f64> = Vec::with_capacity(l * d);
    for _ in 0..l {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        for prev in w.chunks(d) {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        w.extend(v.iter().map(|a| a / norm));
    }
    w
}

/// Least-squares refit of the up-projection given the current assignments:
/// solves `min Σ ‖x − U e_c − u‖²` through the normal equations.
fn refit_up(tok: &mut Tokenizer, rows: &[f64]) {
    let (d, l) = (tok.in_dim, tok.latent_dim);
    let codes = tok.codebook.nearest(&tok.encode_rows(rows));
    let a = l + 1;
    let mut ata = vec![0.0; a * a];
    let mut atx = vec![0.0; a * d];
    for (i, &c) in codes.iter().enumerate() {
        let mut e: Vec<f64> = tok.codebook.entry(c).to_vec();
        e.push(1.0);
        for r in 0..a {
            for s in 0..a {
                ata[r * a + s] += e[r] * e[s];
            }
            for j in 0..d {
                atx[r * d + j] += e[r] * rows[i * d + j];
            }
        }
    }
    let Some(sol) = solve_spd(&mut ata, &mut atx, a, d) else {
        return;
    };
    for j in 0..d {
        for r in 0..l {
            tok.up_w[j * l + r] = sol[r * d + j];
        }
        tok.up_b[j] = sol[l * d + j];
    }
}

/// Solves `A X = B` for symmetric positive semi-definite `A` by Cholesky with
/// a small ridge; `None` when the system is numerically singular.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Option<Vec<f64>> {
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let ridge = 1e-10 * trace.max(1.0) / n as f64;
    for i in 0..n {
        a[i * n + i] += ridge;
    }
    let mut lo = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| lo[i * n + k] * lo[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                lo[i * n + i] = s.sqrt();
            } else {
                lo[i * n + j] = s / lo[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n * m];
    for c in 0..m {
        for i in 0..n {
            let s = b[i * m + c] - (0..i).map(|k| lo[i * n + k] * y[k * m + c]).sum::<f64>();
            y[i * m + c] = s / lo[i * n + i];
        }
        for i in (0..n).rev() {
            let s = y[i * m + c] - (i + 1..n).map(|k| lo[k * n + i] * y[k * m + c]).sum::<f64>();
            y[i * m + c] = s / lo[i * n + i];
        }
    }
    Some(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_rate_and_determinism() {
        let w = Waveform::new((0..16000).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect()).unwrap();
        let a = synthetic_teacher(&w).unwrap();
        assert_eq!((a.frames, a.dim), (50, SYNTHETIC_DIM));
        assert_eq!(synthetic_teacher(&w).unwrap(), a);
        let silence = synthetic_teacher(&Waveform::new(vec![0.0; 16000]).unwrap()).unwrap();
        assert_ne!(silence, a);
    }

    #[test]
    fn alignment_nearest_neighbour() {
        // Teacher at 25 Hz, codec at 50 Hz: each token covers two frames.
        assert_eq!(align_tokens(&[1, 2, 3], 25.0, 0.0, 6, 50.0).unwrap(), vec![1, 1, 2, 2, 3, 3]);
        // Same rate with a one-frame offset shifts by one.
        assert_eq!(align_tokens(&[1, 2, 3, 4], 50.0, 0.02, 3, 50.0).unwrap(), vec![2, 3, 4]);
        // Past the end clamps to the last token.
        assert_eq!(align_tokens(&[7], 50.0, 0.0, 3, 50.0).unwrap(), vec![7, 7, 7]);
    }

    #[test]
    fn tokenizer_file_round_trip() {
        let tok = Tokenizer::with_identity(2, &[0.0, 0.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let back = Tokenizer::from_bytes(&tok.to_bytes()).unwrap();
        assert_eq!(back, tok);
    }

    #[test]
    fn spd_solver_recovers_known_solution() {
        let mut a = vec![4.0, 1.0, 1.0, 3.0];
        let mut b = vec![1.0, 2.0];
        let x = solve_spd(&mut a, &mut b, 2, 1).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-9 && (x[1] - 7.0 / 11.0).abs() < 1e-9);
    }
}
