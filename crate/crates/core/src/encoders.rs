//! Speech encoder (waveform to frame-level latents), speaker encoder (log-mel
//! to one pooled vector), the linear speaker classifier, and the serial
//! subtraction step that removes the speaker vector from every frame.

use std::path::Path;

use musa_autograd::{Bound, Conv1dCfg, Conv2dCfg, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dsp::{mel_plan, Waveform, MEL_N_FFT, N_MELS};
use crate::error::{MusaError, Result};
use crate::io::{read_to_string, sha256_hex, write_atomic};
use crate::nn::{downsample_cfg, Conv1d, Conv2d, Linear, ResidualLstm, ResidualUnit};

/// `d x t` latent matrix (row-major, one row per channel).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRepresentation {
    pub dim: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    pub source_length: usize,
}

impl FrameRepresentation {
    pub fn new(dim: usize, frames: usize, values: Vec<f64>, source_length: usize) -> Result<Self> {
        if values.len() != dim * frames {
            return Err(MusaError::DimensionMismatch {
                expected: dim * frames,
                got: values.len(),
            });
        }
        Ok(Self {
            dim,
            frames,
            values,
            source_length,
        })
    }

    pub fn at(&self, channel: usize, frame: usize) -> f64 {
        self.values[channel * self.frames + frame]
    }

    /// Frame-major copy, `[t, d]`.
    pub fn to_frames(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for c in 0..self.dim {
            for j in 0..self.frames {
                out[j * self.dim + c] = self.values[c * self.frames + j];
            }
        }
        out
    }

    pub fn from_frames(dim: usize, frames: usize, rows: &[f64], source_length: usize) -> Result<Self> {
        if rows.len() != dim * frames {
            return Err(MusaError::DimensionMismatch {
                expected: dim * frames,
                got: rows.len(),
            });
        }
        let mut values = vec![0.0; rows.len()];
        for j in 0..frames {
            for c in 0..dim {
                values[c * frames + j] = rows[j * dim + c];
            }
        }
        Self::new(dim, frames, values, source_length)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.dim, self.frames], self.values.clone())
    }
}

/// Global speaker vector; the empty variant is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    values: Vec<f64>,
    is_empty: bool,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            is_empty: false,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            is_empty: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_empty
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        cosine(&self.values, &other.values)
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// `r1[:, j] = x[:, j] - s` for every frame.
pub fn subtract_speaker(x: &FrameRepresentation, s: &SpeakerEmbedding) -> Result<FrameRepresentation> {
    broadcast(x, s, |a, b| a - b)
}

/// Inverse of [`subtract_speaker`]: `x[:, j] + s`.
pub fn add_speaker(x: &FrameRepresentation, s: &SpeakerEmbedding) -> Result<FrameRepresentation> {
    broadcast(x, s, |a, b| a + b)
}

fn broadcast(x: &FrameRepresentation, s: &SpeakerEmbedding, f: impl Fn(f64, f64) -> f64) -> Result<FrameRepresentation> {
    if s.dim() != x.dim {
        return Err(MusaError::DimensionMismatch {
            expected: x.dim,
            got: s.dim(),
        });
    }
    let mut values = x.values.clone();
    for (c, row) in values.chunks_mut(x.frames.max(1)).enumerate() {
        for v in row {
            *v = f(*v, s.values[c]);
        }
    }
    FrameRepresentation::new(x.dim, x.frames, values, x.source_length)
}

/// Convolutional speech encoder: input conv, one residual unit plus strided
/// conv per stride (channels doubling), residual LSTM, projection to d.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    input: Conv1d,
    blocks: Vec<(ResidualUnit, Conv1d)>,
    lstm: ResidualLstm,
    output: Conv1d,
    hop: usize,
}

impl SpeechEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut ch = cfg.encoder_channels;
        let input = Conv1d::new(store, "enc.in", 1, ch, 7, Conv1dCfg::same(7), rng);
        let blocks = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let unit = ResidualUnit::new(store, &format!("enc.b{i}.res"), ch, rng);
                let down = Conv1d::new(store, &format!("enc.b{i}.down"), ch, ch * 2, 2 * s, downsample_cfg(s), rng);
                ch *= 2;
                (unit, down)
            })
            .collect();
        let lstm = ResidualLstm::new(store, "enc.lstm", ch, cfg.lstm_layers, rng);
        let output = Conv1d::new(store, "enc.out", ch, cfg.latent_dim, 7, Conv1dCfg::same(7), rng);
        Self {
            input,
            blocks,
            lstm,
            output,
            hop: cfg.hop(),
        }
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// `[B, 1, L]` with `L` a multiple of the hop to `[B, d, L / hop]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = self.input.forward(p, x);
        for (unit, down) in &self.blocks {
            h = down.forward(p, unit.forward(p, h).elu());
        }
        h = self.lstm.forward(p, h);
        self.output.forward(p, h.elu())
    }
}

/// Conv2d blocks over the log-mel image, temporal mean pooling, linear to d.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
    pooled_dim: usize,
}

/// Size knobs for [`SpeakerEncoder`]; derived from [`ModelConfig`] normally,
/// and set by hand for the tiny gradient-check encoder.
#[derive(Debug, Clone)]
pub struct SpeakerEncoderShape {
    pub channels: Vec<usize>,
    pub freq_stride: usize,
    pub latent_dim: usize,
    pub output_bias: bool,
}

impl From<&ModelConfig> for SpeakerEncoderShape {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            channels: cfg.speaker_channels.clone(),
            freq_stride: cfg.speaker_freq_stride,
            latent_dim: cfg.latent_dim,
            output_bias: true,
        }
    }
}

impl SpeakerEncoder {
    pub fn new(store: &mut ParamStore, shape: &SpeakerEncoderShape, rng: &mut impl Rng) -> Self {
        let mut cin = 1;
        let mut height = N_MELS;
        let convs = shape
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(
                    store,
                    &format!("spk.conv{i}"),
                    cin,
                    cout,
                    (3, 3),
                    Conv2dCfg::new((shape.freq_stride, 1), (1, 1)),
                    rng,
                );
                cin = cout;
                height = (height + 2 - 3) / shape.freq_stride + 1;
                c
            })
            .collect();
        let pooled_dim = cin * height;
        let proj = Linear::new(store, "spk.proj", pooled_dim, shape.latent_dim, shape.output_bias, rng);
        Self { convs, proj, pooled_dim }
    }

    /// `[1, 1, 80, F]` log-mel to `[1, d]`.
    pub fn forward_mel<'g>(&self, p: &Bound<'g>, mel: Var<'g>) -> Var<'g> {
        let mut h = mel;
        for c in &self.convs {
            h = c.forward(p, h).elu();
        }
        let s = h.shape();
        let pooled = h.reshape(vec![s[0], s[1] * s[2], s[3]]).mean_last();
        debug_assert_eq!(pooled.shape()[1], self.pooled_dim);
        self.proj.forward(p, pooled)
    }

    /// One embedding row per waveform, stacked to `[B, d]`.
    pub fn forward_waves<'g>(&self, p: &Bound<'g>, graph: &'g Graph, waves: &[&[f64]]) -> Result<Var<'g>> {
        let rows = waves
            .iter()
            .map(|w| Ok(self.forward_mel(p, graph.constant(log_mel_image(w)?))))
            .collect::<Result<Vec<_>>>()?;
        Ok(graph.concat0(&rows))
    }
}

/// `[1, 1, 80, F]` log-mel tensor of raw samples.
pub fn log_mel_image(samples: &[f64]) -> Result<Tensor> {
    let (values, frames) = mel_plan().log_mel(samples).ok_or(MusaError::TooShort {
        needed: MEL_N_FFT,
        got: samples.len(),
    })?;
    Ok(Tensor::new(vec![1, 1, N_MELS, frames], values))
}

/// Mean of the cross-entropy on both segment embeddings minus their mean
/// cosine similarity; `s1`, `s2` are `[B, d]`, one row per utterance.
pub fn speaker_distillation_loss<'g>(
    p: &Bound<'g>,
    classifier: &Linear,
    s1: Var<'g>,
    s2: Var<'g>,
    labels: &[usize],
) -> Var<'g> {
    let graph = s1.graph();
    let both = graph.concat0(&[s1, s2]);
    let mut targets = labels.to_vec();
    targets.extend_from_slice(labels);
    let ce = classifier.forward(p, both).cross_entropy(&targets);
    ce.sub(s1.cosine_rows(s2).mean())
}

/// Speaker names indexed by label id, persisted as `speakers.tsv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    names: Vec<String>,
}

impl LabelTable {
    /// Sorted, de-duplicated names so ids do not depend on manifest order.
    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn check(&self, label: usize) -> Result<usize> {
        if label < self.names.len() {
            Ok(label)
        } else {
            Err(MusaError::LabelOutOfRange {
                label,
                num_speakers: self.names.len(),
            })
        }
    }

    pub fn to_tsv(&self) -> String {
        self.names.iter().enumerate().map(|(i, n)| format!("{i}\t{n}\n")).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_tsv().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut names = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, name) = line.split_once('\t').ok_or_else(|| MusaError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "expected id<TAB>name".into(),
            })?;
            if id.trim().parse::<usize>().ok() != Some(names.len()) {
                return Err(MusaError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: "ids must be consecutive from 0".into(),
                });
            }
            names.push(name.to_string());
        }
        Ok(Self { names })
    }
}

/// Frame-level encoder output for one waveform, without the tape.
pub fn encode_speech_frames(encoder: &SpeechEncoder, store: &ParamStore, w: &Waveform, latent_dim: usize) -> Result<FrameRepresentation> {
    let hop = encoder.hop();
    let t = w.len() / hop;
    if t == 0 {
        return Err(MusaError::TooShort { needed: hop, got: w.len() });
    }
    let g = Graph::new();
    let p = store.bind(&g, false);
    let x = g.constant(Tensor::new(vec![1, 1, t * hop], w.samples()[..t * hop].to_vec()));
    let y = encoder.forward(&p, x).value();
    FrameRepresentation::new(latent_dim, t, y.data().to_vec(), w.len())
}

/// Pooled speaker vector for one waveform, without the tape.
pub fn encode_speaker_vector(encoder: &SpeakerEncoder, store: &ParamStore, w: &Waveform) -> Result<SpeakerEmbedding> {
    let g = Graph::new();
    let p = store.bind(&g, false);
    let s = encoder.forward_waves(&p, &g, &[w.samples()])?;
    Ok(SpeakerEmbedding::new(s.value().data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(dim: usize, t: usize) -> FrameRepresentation {
        FrameRepresentation::new(dim, t, (0..dim * t).map(|i| (i as f64 * 0.37).sin()).collect(), t * 320).unwrap()
    }

    #[test]
    fn subtract_zero_is_identity_and_self_subtraction_is_zero() {
        let x = frames(4, 3);
        assert_eq!(subtract_speaker(&x, &SpeakerEmbedding::empty(4)).unwrap(), x);
        let s = SpeakerEmbedding::new(vec![0.5, -1.0, 2.0, 0.0]);
        let mut vals = Vec::new();
        for c in 0..4 {
            vals.extend(std::iter::repeat_n(s.values()[c], 3));
        }
        let constant = FrameRepresentation::new(4, 3, vals, 960).unwrap();
        assert!(subtract_speaker(&constant, &s).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let x = frames(4, 3);
        assert!(matches!(
            subtract_speaker(&x, &SpeakerEmbedding::empty(5)),
            Err(MusaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn frame_major_round_trip() {
        let x = frames(3, 5);
        let back = FrameRepresentation::from_frames(3, 5, &x.to_frames(), x.source_length).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn label_table_sorted_and_checked() {
        let t = LabelTable::from_names(["bob", "alice", "bob"]);
        assert_eq!(t.names(), ["alice", "bob"]);
        assert_eq!(t.id("bob"), Some(1));
        assert!(matches!(t.check(2), Err(MusaError::LabelOutOfRange { .. })));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("speakers.tsv");
        t.save(&p).unwrap();
        assert_eq!(LabelTable::load(&p).unwrap(), t);
    }
}
