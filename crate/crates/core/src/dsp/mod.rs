//! Audio front end: waveform type, WAV I/O, resampling, log-mel features and
//! YIN pitch tracking. Everything downstream works on 16 kHz mono.

mod mel;
mod pitch;
mod resample;
mod wav;

use std::path::Path;

pub use mel::{mel_plan, mel_spectrogram, MelSpectrogram, MEL_FLOOR, MEL_HOP, MEL_N_FFT, N_MELS};
pub use pitch::{extract_pitch, PitchTrack, PITCH_FRAME, PITCH_HOP};
pub use resample::resample;
pub use wav::{encode_wav_16bit, read_wav, write_wav_16bit, WavData};

use crate::error::{MusaError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Peak level that loaded audio is normalized to.
pub const LOAD_PEAK: f64 = 0.95;

/// A mono 16 kHz signal with finite samples in `[-1, 1]`.
#[derive(Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl std::fmt::Debug for Waveform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Waveform({} samples, {:.3} s)", self.samples.len(), self.duration_secs())
    }
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(MusaError::EmptyAudio);
        }
        if let Some((i, v)) = samples.iter().enumerate().find(|(_, v)| !v.is_finite() || v.abs() > 1.0) {
            return Err(MusaError::InvalidSample(format!("sample {i} is {v}")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Copy of `len` samples starting at `start`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Waveform> {
        if len == 0 || start + len > self.samples.len() {
            return Err(MusaError::InvalidInput(format!(
                "segment {start}..{} outside {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Waveform::new(self.samples[start..start + len].to_vec())
    }

    /// Scales so the largest magnitude equals `peak`; silent signals are left alone.
    pub fn peak_normalized(&self, peak: f64) -> Waveform {
        let m = self.samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m == 0.0 {
            return self.clone();
        }
        let g = peak / m;
        Waveform {
            samples: self.samples.iter().map(|v| (v * g).clamp(-1.0, 1.0)).collect(),
        }
    }
}

/// Reads a WAV file, mixes to mono, resamples to 16 kHz and peak-normalizes.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let raw = read_wav(path)?;
    let mono = raw.to_mono();
    if mono.is_empty() {
        return Err(MusaError::EmptyAudio);
    }
    let at_16k = if raw.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, raw.sample_rate, SAMPLE_RATE)
    };
    let clipped: Vec<f64> = at_16k.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(Waveform::new(clipped)?.peak_normalized(LOAD_PEAK))
}

/// Writes 16-bit PCM at 16 kHz through a temporary file and a rename.
pub fn save_waveform(path: &Path, w: &Waveform) -> Result<()> {
    write_wav_16bit(path, w.samples(), SAMPLE_RATE)
}
