//! Band-limited resampling by direct evaluation of a Hann-windowed sinc kernel.

use std::f64::consts::PI;

/// Zero crossings of the kernel on each side, counted at the lower of the two rates.
const HALF_ZEROS: f64 = 16.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Output length is `round(len * to / from)`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    // Cutoff in cycles per input sample.
    let fc = 0.5 * ROLLOFF * ratio.min(1.0);
    let half_width = HALF_ZEROS / (2.0 * fc);
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let w = 0.5 * (1.0 + (PI * d / half_width).cos());
                acc += xk * 2.0 * fc * sinc(2.0 * fc * d) * w;
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_follows_ratio() {
        assert_eq!(resample(&vec![0.0; 44100], 44100, 16000).len(), 16000);
        assert_eq!(resample(&vec![0.0; 1000], 8000, 16000).len(), 2000);
        assert_eq!(resample(&vec![0.0; 10], 16000, 16000).len(), 10);
    }

    #[test]
    fn low_tone_survives_downsampling() {
        let from = 48000u32;
        let x: Vec<f64> = (0..48000).map(|i| (2.0 * PI * 440.0 * i as f64 / from as f64).sin()).collect();
        let y = resample(&x, from, 16000);
        // Compare away from the edges against the analytic tone.
        let err = (2000..14000)
            .map(|n| (y[n] - (2.0 * PI * 440.0 * n as f64 / 16000.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn tone_above_target_nyquist_is_suppressed() {
        let from = 48000u32;
        let x: Vec<f64> = (0..48000).map(|i| (2.0 * PI * 12000.0 * i as f64 / from as f64).sin()).collect();
        let y = resample(&x, from, 16000);
        let rms = (y[2000..14000].iter().map(|v| v * v).sum::<f64>() / 12000.0).sqrt();
        assert!(rms < 0.01, "alias rms {rms}");
    }
}
