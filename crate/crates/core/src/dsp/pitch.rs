//! YIN fundamental-frequency tracker: 64 ms frames every 10 ms, search range
//! 60 to 500 Hz, with parabolic refinement of the chosen lag.

use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{MusaError, Result};

pub const PITCH_FRAME: usize = 1024;
pub const PITCH_HOP: usize = 160;
const F0_MIN: f64 = 60.0;
const F0_MAX: f64 = 500.0;
/// First dip of the normalized difference below this picks the period.
const DIP_THRESHOLD: f64 = 0.15;
/// Frames whose best normalized difference exceeds this are unvoiced.
const VOICING_THRESHOLD: f64 = 0.3;
/// Frames quieter than this RMS are unvoiced regardless of periodicity.
const SILENCE_RMS: f64 = 1e-3;

/// Per-frame F0 in Hz (zero when unvoiced) and voicing flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub hop_secs: f64,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_f0(&self) -> Vec<f64> {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect()
    }

    /// `frame_index,f0_hz,voiced` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,f0_hz,voiced\n");
        for (i, (f, v)) in self.f0_hz.iter().zip(&self.voiced).enumerate() {
            s.push_str(&format!("{i},{f},{}\n", u8::from(*v)));
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut f0_hz = Vec::new();
        let mut voiced = Vec::new();
        let err = |line: usize, msg: &str| MusaError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("frame_index")) {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(err(n + 1, "expected frame_index,f0_hz,voiced"));
            }
            let idx: usize = cols[0].trim().parse().map_err(|_| err(n + 1, "bad frame index"))?;
            if idx != f0_hz.len() {
                return Err(err(n + 1, "frame indices must be consecutive from 0"));
            }
            let f: f64 = cols[1].trim().parse().map_err(|_| err(n + 1, "bad f0"))?;
            let v = match cols[2].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(err(n + 1, "bad voicing flag")),
            };
            f0_hz.push(f);
            voiced.push(v);
        }
        Ok(Self {
            f0_hz,
            voiced,
            hop_secs: PITCH_HOP as f64 / SAMPLE_RATE as f64,
        })
    }
}

/// Needs at least one 1024-sample frame.
pub fn extract_pitch(w: &Waveform) -> Result<PitchTrack> {
    let x = w.samples();
    if x.len() < PITCH_FRAME {
        return Err(MusaError::TooShort {
            needed: PITCH_FRAME,
            got: x.len(),
        });
    }
    let sr = SAMPLE_RATE as f64;
    let tau_min = (sr / F0_MAX).floor() as usize;
    let tau_max = (sr / F0_MIN).ceil() as usize;
    let win = PITCH_FRAME - tau_max - 1;
    let frames = (x.len() - PITCH_FRAME) / PITCH_HOP + 1;
    let mut f0_hz = Vec::with_capacity(frames);
    let mut voiced = Vec::with_capacity(frames);
    let mut d = vec![0.0; tau_max + 2];
    let mut cmndf = vec![1.0; tau_max + 2];
    for fi in 0..frames {
        let frame = &x[fi * PITCH_HOP..fi * PITCH_HOP + PITCH_FRAME];
        let rms = (frame.iter().map(|v| v * v).sum::<f64>() / PITCH_FRAME as f64).sqrt();
        for (tau, dv) in d.iter_mut().enumerate().skip(1) {
            *dv = (0..win).map(|j| (frame[j] - frame[j + tau]).powi(2)).sum();
        }
        let mut running = 0.0;
        for tau in 1..d.len() {
            running += d[tau];
            cmndf[tau] = if running > 0.0 { d[tau] * tau as f64 / running } else { 1.0 };
        }
        let mut pick = None;
        let mut tau = tau_min;
        while tau <= tau_max {
            if cmndf[tau] < DIP_THRESHOLD {
                while tau < tau_max && cmndf[tau + 1] < cmndf[tau] {
                    tau += 1;
                }
                pick = Some(tau);
                break;
            }
            tau += 1;
        }
        let tau = pick.unwrap_or_else(|| (tau_min..=tau_max).min_by(|&a, &b| cmndf[a].total_cmp(&cmndf[b])).unwrap());
        let is_voiced = rms > SILENCE_RMS && cmndf[tau] < VOICING_THRESHOLD;
        if is_voiced {
            let (a, b, c) = (cmndf[tau - 1], cmndf[tau], cmndf[tau + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-1.0, 1.0) } else { 0.0 };
            f0_hz.push(sr / (tau as f64 + shift));
        } else {
            f0_hz.push(0.0);
        }
        voiced.push(is_voiced);
    }
    Ok(PitchTrack {
        f0_hz,
        voiced,
        hop_secs: PITCH_HOP as f64 / sr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tone(f0: f64, secs: f64) -> Waveform {
        let n = (secs * 16000.0) as usize;
        Waveform::new((0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * f0 * i as f64 / 16000.0).sin()).collect()).unwrap()
    }

    #[test]
    fn frame_count() {
        let t = extract_pitch(&tone(200.0, 1.0)).unwrap();
        assert_eq!(t.len(), (16000 - 1024) / 160 + 1);
    }

    #[test]
    fn sine_is_voiced_at_its_frequency() {
        for f0 in [80.0, 150.0, 310.0, 450.0] {
            let t = extract_pitch(&tone(f0, 0.5)).unwrap();
            assert!(t.voiced.iter().all(|&v| v), "{f0} Hz not voiced");
            assert!(t.f0_hz.iter().all(|f| (f - f0).abs() < 1.0), "{f0}: {:?}", &t.f0_hz[..3]);
        }
    }

    #[test]
    fn noise_and_silence_are_unvoiced() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise = Waveform::new((0..16000).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let t = extract_pitch(&noise).unwrap();
        let frac = t.voiced.iter().filter(|&&v| v).count() as f64 / t.len() as f64;
        assert!(frac < 0.05, "voiced fraction {frac}");
        let s = extract_pitch(&Waveform::new(vec![0.0; 4000]).unwrap()).unwrap();
        assert!(s.voiced.iter().all(|&v| !v));
    }

    #[test]
    fn csv_round_trip() {
        let t = extract_pitch(&tone(220.0, 0.2)).unwrap();
        let back = PitchTrack::from_csv(&t.to_csv(), Path::new("x.csv")).unwrap();
        assert_eq!(back.voiced, t.voiced);
        for (a, b) in back.f0_hz.iter().zip(&t.f0_hz) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
