//! 80-band log-mel features: 1024-point FFT, hop 256, periodic Hann, HTK mel
//! scale over 0 to 8 kHz, magnitude spectrum and `ln(max(mel, 1e-5))`.

use std::sync::{Arc, OnceLock};

use musa_autograd::spectral::{MelPlan, SpectralPlan};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{MusaError, Result};

pub const N_MELS: usize = 80;
pub const MEL_N_FFT: usize = 1024;
pub const MEL_HOP: usize = 256;
pub const MEL_FLOOR: f64 = 1e-5;

/// Shared plan used by the speaker encoder, the reconstruction loss and the
/// scoring embedder, so all of them see identical features.
pub fn mel_plan() -> Arc<MelPlan> {
    static PLAN: OnceLock<Arc<MelPlan>> = OnceLock::new();
    PLAN.get_or_init(|| {
        Arc::new(MelPlan::new(
            SpectralPlan::hann(MEL_N_FFT, MEL_HOP),
            N_MELS,
            SAMPLE_RATE as f64,
            0.0,
            SAMPLE_RATE as f64 / 2.0,
            MEL_FLOOR,
        ))
    })
    .clone()
}

/// Row-major `[N_MELS, frames]` log-mel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.frames + frame]
    }

    /// Per-band mean over frames.
    pub fn band_means(&self) -> Vec<f64> {
        self.values
            .chunks(self.frames)
            .map(|row| row.iter().sum::<f64>() / self.frames as f64)
            .collect()
    }
}

/// Fails for signals shorter than one 1024-sample window.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    let (values, frames) = mel_plan().log_mel(w.samples()).ok_or(MusaError::TooShort {
        needed: MEL_N_FFT,
        got: w.len(),
    })?;
    Ok(MelSpectrogram { frames, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_unpadded() {
        let w = Waveform::new(vec![0.0; 16000]).unwrap();
        let m = mel_spectrogram(&w).unwrap();
        assert_eq!(m.frames, (16000 - 1024) / 256 + 1);
        assert_eq!(m.values.len(), 80 * m.frames);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let w = Waveform::new(vec![0.0; 4096]).unwrap();
        let m = mel_spectrogram(&w).unwrap();
        assert!(m.values.iter().all(|&v| (v - MEL_FLOOR.ln()).abs() < 1e-12));
    }

    #[test]
    fn too_short_is_an_error() {
        let w = Waveform::new(vec![0.0; 1023]).unwrap();
        assert!(matches!(mel_spectrogram(&w), Err(MusaError::TooShort { .. })));
    }

    #[test]
    fn tone_peaks_in_matching_band() {
        let f0 = 1000.0;
        let w = Waveform::new(
            (0..8000)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f0 * i as f64 / 16000.0).sin())
                .collect(),
        )
        .unwrap();
        let m = mel_spectrogram(&w).unwrap();
        let means = m.band_means();
        let best = (0..N_MELS).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        let lo = musa_autograd::spectral::hz_to_mel(0.0);
        let hi = musa_autograd::spectral::hz_to_mel(8000.0);
        let centre = musa_autograd::spectral::mel_to_hz(lo + (hi - lo) * (best + 1) as f64 / 81.0);
        assert!((centre - f0).abs() < 100.0, "peak band centre {centre}");
    }
}
