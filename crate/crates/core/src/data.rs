//! Dataset manifests, the synthetic toy corpus and seeded batch sampling.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{encode_wav_16bit, load_waveform, Waveform, MEL_N_FFT, SAMPLE_RATE};
use crate::encoders::LabelTable;
use crate::error::{MusaError, Result};
use crate::io::{read_to_string, write_atomic};
use crate::model::TrainBatch;
use crate::teacher::{align_tokens, TokenSequence};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker: String,
    pub wav_path: PathBuf,
}

/// `utt_id<TAB>speaker<TAB>wav_path` records. Relative paths are resolved
/// against the manifest's directory on load.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| MusaError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(err(format!("expected utt_id<TAB>speaker<TAB>wav_path, got {} fields", fields.len())));
            }
            let utt_id = fields[0].trim().to_string();
            if !seen.insert(utt_id.clone()) {
                return Err(err(format!("duplicate utt_id {utt_id}")));
            }
            let wav = PathBuf::from(fields[2].trim());
            entries.push(ManifestEntry {
                utt_id,
                speaker: fields[1].trim().to_string(),
                wav_path: if wav.is_absolute() { wav } else { base.join(wav) },
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }

    /// Writes the manifest with paths as given (no relativization).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self
            .entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.utt_id, e.speaker, e.wav_path.display()))
            .collect();
        write_atomic(path, text.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> LabelTable {
        LabelTable::from_names(self.entries.iter().map(|e| e.speaker.clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub wave: Waveform,
    pub tokens: Option<TokenSequence>,
}

/// All manifest audio in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labels: LabelTable,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(MusaError::InsufficientData("manifest lists no utterances".into()));
        }
        let labels = manifest.labels();
        let utterances = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Utterance {
                    id: e.utt_id.clone(),
                    speaker: labels.id(&e.speaker).expect("label table built from this manifest"),
                    wave: load_waveform(&e.wav_path)?,
                    tokens: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { labels, utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Lengths, in samples, of what one batch item is cut into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchShape {
    pub batch_size: usize,
    /// Multiple of `hop`.
    pub crop: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub hop: usize,
}

impl BatchShape {
    pub fn new(batch_size: usize, crop_secs: f64, segment_min_secs: f64, segment_max_secs: f64, hop: usize) -> Self {
        let sr = SAMPLE_RATE as f64;
        let crop = (((crop_secs * sr) as usize) / hop).max(1) * hop;
        let segment_min = ((segment_min_secs * sr) as usize).max(MEL_N_FFT);
        Self {
            batch_size,
            crop,
            segment_min,
            segment_max: ((segment_max_secs * sr) as usize).max(segment_min),
            hop,
        }
    }
}

/// Utterance visited at absolute sample position `pos` of the training
/// stream: utterances are taken in a fresh seeded permutation every pass.
pub fn utterance_at(pos: u64, n: usize, seed: u64) -> usize {
    let epoch = pos / n as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 63 | epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[(pos % n as u64) as usize]
}

/// Deterministic batch for optimizer step `step`. Each item is a hop-aligned
/// crop with its aligned tokens, plus two independent speaker segments from
/// the same utterance. Signals shorter than a crop are zero-padded.
pub fn sample_batch(data: &Dataset, shape: &BatchShape, step: u64, seed: u64) -> Result<TrainBatch> {
    if data.is_empty() {
        return Err(MusaError::InsufficientData("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let t = shape.crop / shape.hop;
    let frame_rate = SAMPLE_RATE as f64 / shape.hop as f64;
    let mut batch = TrainBatch {
        crops: Vec::with_capacity(shape.batch_size),
        seg1: Vec::with_capacity(shape.batch_size),
        seg2: Vec::with_capacity(shape.batch_size),
        labels: Vec::with_capacity(shape.batch_size),
        tokens: Vec::with_capacity(shape.batch_size),
    };
    for b in 0..shape.batch_size {
        let utt = &data.utterances[utterance_at(step * shape.batch_size as u64 + b as u64, data.len(), seed)];
        let x = utt.wave.samples();
        let frames_avail = x.len().saturating_sub(shape.crop) / shape.hop;
        let start = rng.random_range(0..=frames_avail) * shape.hop;
        let mut crop = vec![0.0; shape.crop];
        let end = (start + shape.crop).min(x.len());
        crop[..end - start].copy_from_slice(&x[start..end]);
        let tokens = utt
            .tokens
            .as_ref()
            .ok_or_else(|| MusaError::InvalidInput(format!("utterance {} has no teacher tokens", utt.id)))?;
        let aligned = align_tokens(&tokens.tokens, tokens.frame_rate(), start as f64 / SAMPLE_RATE as f64, t, frame_rate)?;
        let segment = |rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
            if x.len() < MEL_N_FFT {
                return Err(MusaError::TooShort {
                    needed: MEL_N_FFT,
                    got: x.len(),
                });
            }
            let len = rng.random_range(shape.segment_min..=shape.segment_max).min(x.len());
            let s = rng.random_range(0..=x.len() - len);
            Ok(x[s..s + len].to_vec())
        };
        batch.seg1.push(segment(&mut rng)?);
        batch.seg2.push(segment(&mut rng)?);
        batch.crops.push(crop);
        batch.labels.push(utt.speaker);
        batch.tokens.push(aligned);
    }
    Ok(batch)
}

/// Voice of one synthetic speaker: formant positions are scaled by
/// `formant_scale` and harmonics fall off as `k^-tilt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVoice {
    pub formant_scale: f64,
    pub tilt: f64,
    pub breathiness: f64,
}

pub const TOY_SPEAKERS: [(&str, ToyVoice); 2] = [
    (
        "spk_a",
        ToyVoice {
            formant_scale: 0.86,
            tilt: 1.3,
            breathiness: 0.01,
        },
    ),
    (
        "spk_b",
        ToyVoice {
            formant_scale: 1.16,
            tilt: 0.8,
            breathiness: 0.03,
        },
    ),
];
pub const TOY_UTTERANCES_PER_SPEAKER: usize = 5;
pub const TOY_SECONDS: f64 = 2.0;
pub const TOY_SEED: u64 = 20240917;

/// (F1, F2, F3) of five vowels.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 170.0];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.6, 0.3];

enum Segment {
    Vowel(usize),
    Fricative,
    Pause,
}

fn envelope(f: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .zip(BANDWIDTHS)
        .zip(FORMANT_GAINS)
        .map(|((&fc, bw), g)| g / (1.0 + ((f - fc) / bw).powi(2)))
        .sum()
}

/// One synthetic utterance: a random vowel/fricative/pause sequence over an
/// F0 contour drawn from a range both speakers share, so that the speakers
/// differ by timbre only. Harmonic amplitudes follow the formant envelope.
pub fn synthesize_toy_utterance(voice: &ToyVoice, seed: u64, secs: f64) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let n = (secs * sr) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Segment plan with per-sample formant targets.
    let mut plan: Vec<(usize, Segment)> = Vec::new();
    let mut pos = 0;
    while pos < n {
        let len = (rng.random_range(0.10..0.28) * sr) as usize;
        let kind = match rng.random_range(0..10) {
            0 => Segment::Pause,
            1 | 2 => Segment::Fricative,
            _ => Segment::Vowel(rng.random_range(0..VOWELS.len())),
        };
        plan.push((len.min(n - pos), kind));
        pos += len;
    }
    let f0_base = rng.random_range(110.0..170.0);
    let f0_depth = rng.random_range(0.05..0.15);
    let f0_rate = rng.random_range(1.5..3.5);
    let f0_phase = rng.random_range(0.0..2.0 * PI);

    let mut out = vec![0.0; n];
    let mut phase = 0.0f64;
    let mut hp_prev = (0.0, 0.0);
    let mut start = 0;
    let mut prev_formants = VOWELS[0];
    for (len, kind) in &plan {
        let fade = (0.02 * sr) as usize;
        let target = match kind {
            Segment::Vowel(v) => VOWELS[*v],
            _ => prev_formants,
        };
        for i in 0..*len {
            let idx = start + i;
            let tsec = idx as f64 / sr;
            let gain = {
                let edge = i.min(len - 1 - i) as f64 / fade as f64;
                if edge >= 1.0 {
                    1.0
                } else {
                    0.5 - 0.5 * (PI * edge).cos()
                }
            };
            let f0 = f0_base * (1.0 + f0_depth * (2.0 * PI * f0_rate * tsec + f0_phase).sin()) * (1.0 - 0.12 * tsec / secs);
            phase += 2.0 * PI * f0 / sr;
            if phase > 2.0 * PI {
                phase -= 2.0 * PI;
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            match kind {
                Segment::Vowel(_) => {
                    // Formants glide from the previous vowel over 40 ms.
                    let glide = (i as f64 / (0.04 * sr)).min(1.0);
                    let mut formants = [0.0; 3];
                    for k in 0..3 {
                        formants[k] = voice.formant_scale * (prev_formants[k] + glide * (target[k] - prev_formants[k]));
                    }
                    let mut v = 0.0;
                    let mut h = 1;
                    while (h as f64) * f0 < 7500.0 {
                        let f = h as f64 * f0;
                        v += envelope(f, &formants) * (h as f64).powf(-voice.tilt) * (h as f64 * phase).sin();
                        h += 1;
                    }
                    out[idx] = gain * (v + voice.breathiness * noise);
                }
                Segment::Fricative => {
                    // First-order high-pass of white noise.
                    let y = 0.85 * (hp_prev.1 + noise - hp_prev.0);
                    hp_prev = (noise, y);
                    out[idx] = gain * 0.08 * y * voice.formant_scale;
                }
                Segment::Pause => out[idx] = 0.002 * noise,
            }
        }
        if let Segment::Vowel(_) = kind {
            prev_formants = target;
        }
        start += len;
    }
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    out.iter().map(|v| 0.9 * v / peak).collect()
}

/// Writes the toy corpus (16-bit WAVs plus `manifest.tsv` with relative
/// paths) into `dir` and returns the manifest as loaded from there.
pub fn write_toy_corpus(dir: &Path) -> Result<Manifest> {
    let mut lines = String::new();
    for (k, (name, voice)) in TOY_SPEAKERS.iter().enumerate() {
        for u in 0..TOY_UTTERANCES_PER_SPEAKER {
            let id = format!("{name}_{u}");
            let seed = TOY_SEED + 1000 * k as u64 + u as u64;
            let samples = synthesize_toy_utterance(voice, seed, TOY_SECONDS);
            write_atomic(&dir.join(format!("{id}.wav")), &encode_wav_16bit(&samples, SAMPLE_RATE))?;
            lines.push_str(&format!("{id}\t{name}\t{id}.wav\n"));
        }
    }
    let path = dir.join("manifest.tsv");
    write_atomic(&path, lines.as_bytes())?;
    Manifest::load(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing_and_errors() {
        let p = Path::new("/data/m.tsv");
        let m = Manifest::parse("a\tspk1\ta.wav\n\n# comment\nb\tspk0\t/abs/b.wav\n", p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].wav_path, PathBuf::from("/data/a.wav"));
        assert_eq!(m.entries[1].wav_path, PathBuf::from("/abs/b.wav"));
        assert_eq!(m.labels().names(), ["spk0", "spk1"]);
        assert!(matches!(Manifest::parse("a\tb\n", p), Err(MusaError::Parse { line: 1, .. })));
        assert!(matches!(Manifest::parse("a\ts\tx\na\ts\ty\n", p), Err(MusaError::Parse { line: 2, .. })));
    }

    #[test]
    fn every_utterance_visited_once_per_pass() {
        for pass in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|i| utterance_at(pass * 7 + i, 7, 5)).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn toy_utterance_is_bounded_and_deterministic() {
        let v = TOY_SPEAKERS[0].1;
        let a = synthesize_toy_utterance(&v, 3, 0.5);
        assert_eq!(a.len(), 8000);
        assert!(a.iter().all(|x| x.abs() <= 0.9 + 1e-12));
        assert_eq!(a, synthesize_toy_utterance(&v, 3, 0.5));
        assert_ne!(a, synthesize_toy_utterance(&v, 4, 0.5));
    }
}
