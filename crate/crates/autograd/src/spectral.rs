//! Framed STFT and log-mel kernels, usable both as plain functions and as
//! differentiable tape ops.
//!
//! Framing is unpadded: frame `f` covers samples `f*hop .. f*hop + n_fft`, so a
//! signal of length `L >= n_fft` yields `(L - n_fft) / hop + 1` frames.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::graph::Var;
use crate::tensor::Tensor;

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, row-major `[n_mels, n_fft/2 + 1]`,
/// each with unit peak.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Vec<f64> {
    let bins = n_fft / 2 + 1;
    let lo = hz_to_mel(fmin);
    let hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let w = if f >= left && f <= center && center > left {
                (f - left) / (center - left)
            } else if f > center && f <= right && right > center {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[m * bins + k] = w;
        }
    }
    fb
}

pub struct SpectralPlan {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPlan")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl SpectralPlan {
    pub fn new(n_fft: usize, hop: usize, window: Vec<f64>) -> Self {
        assert_eq!(window.len(), n_fft, "window length must equal n_fft");
        assert!(n_fft >= 2 && hop >= 1);
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window,
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn hann(n_fft: usize, hop: usize) -> Self {
        Self::new(n_fft, hop, hann_window(n_fft))
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of whole frames, or `None` when the signal is shorter than one window.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| (len - self.n_fft) / self.hop + 1)
    }

    /// One-sided spectrum of the windowed frame starting at `start`.
    pub fn frame_spectrum(&self, x: &[f64], start: usize) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = x[start..start + self.n_fft]
            .iter()
            .zip(&self.window)
            .map(|(v, w)| Complex::new(v * w, 0.0))
            .collect();
        self.fwd.process(&mut buf);
        buf.truncate(self.n_bins());
        buf
    }

    /// Adjoint of [`Self::frame_spectrum`]: maps a gradient over the one-sided
    /// spectrum (real part as `re`, imaginary part as `im`) back to the frame's
    /// samples. With `X_k = sum x_n e^{-i theta}`, the sample gradient is
    /// `Re(sum_k G_k e^{+i theta})`, i.e. an unnormalized inverse FFT.
    pub fn frame_adjoint(&self, grad_bins: &[Complex<f64>]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        buf[..grad_bins.len()].copy_from_slice(grad_bins);
        self.inv.process(&mut buf);
        buf.iter().zip(&self.window).map(|(c, w)| c.re * w).collect()
    }
}

pub struct MelPlan {
    spectral: SpectralPlan,
    n_mels: usize,
    filterbank: Vec<f64>,
    floor: f64,
}

impl std::fmt::Debug for MelPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelPlan")
            .field("spectral", &self.spectral)
            .field("n_mels", &self.n_mels)
            .field("floor", &self.floor)
            .finish()
    }
}

impl MelPlan {
    /// Magnitude mel spectrogram with `ln(max(mel, floor))` compression.
    pub fn new(spectral: SpectralPlan, n_mels: usize, sample_rate: f64, fmin: f64, fmax: f64, floor: f64) -> Self {
        let filterbank = mel_filterbank(n_mels, spectral.n_fft, sample_rate, fmin, fmax);
        Self {
            spectral,
            n_mels,
            filterbank,
            floor,
        }
    }

    pub fn spectral(&self) -> &SpectralPlan {
        &self.spectral
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn filterbank(&self) -> &[f64] {
        &self.filterbank
    }

    /// Log-mel matrix `[n_mels, frames]` (row-major) of one signal.
    pub fn log_mel(&self, x: &[f64]) -> Option<(Vec<f64>, usize)> {
        let frames = self.spectral.n_frames(x.len())?;
        let mut out = vec![0.0; self.n_mels * frames];
        for f in 0..frames {
            let spec = self.spectral.frame_spectrum(x, f * self.spectral.hop);
            let mags: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
            for (m, row) in self.filterbank.chunks(mags.len()).enumerate() {
                let e: f64 = row.iter().zip(&mags).map(|(w, a)| w * a).sum();
                out[m * frames + f] = e.max(self.floor).ln();
            }
        }
        Some((out, frames))
    }
}

impl<'g> Var<'g> {
    /// `[B, L] -> [B, n_mels, frames]` log-mel spectrogram.
    pub fn log_mel(self, plan: Arc<MelPlan>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "log_mel wants [B, L]");
        let (bsz, l) = (x.dim(0), x.dim(1));
        let sp = &plan.spectral;
        let frames = sp.n_frames(l).expect("log_mel: signal shorter than one window");
        let bins = sp.n_bins();
        let m = plan.n_mels;
        let mut specs = Vec::with_capacity(bsz * frames);
        let mut mels = vec![0.0; bsz * m * frames];
        let mut out = vec![0.0; bsz * m * frames];
        for bi in 0..bsz {
            let xb = &x.data()[bi * l..(bi + 1) * l];
            for f in 0..frames {
                let spec = sp.frame_spectrum(xb, f * sp.hop);
                let mags: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
                for (mi, row) in plan.filterbank.chunks(bins).enumerate() {
                    let e: f64 = row.iter().zip(&mags).map(|(w, a)| w * a).sum();
                    mels[(bi * m + mi) * frames + f] = e;
                    out[(bi * m + mi) * frames + f] = e.max(plan.floor).ln();
                }
                specs.push(spec);
            }
        }
        self.graph.op(Tensor::new(vec![bsz, m, frames], out), &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let sp = &plan.spectral;
                let mut dx = vec![0.0; bsz * l];
                let mut gmag = vec![0.0; bins];
                for bi in 0..bsz {
                    for f in 0..frames {
                        gmag.iter_mut().for_each(|v| *v = 0.0);
                        let mut any = false;
                        for (mi, row) in plan.filterbank.chunks(bins).enumerate() {
                            let e = mels[(bi * m + mi) * frames + f];
                            if e <= plan.floor {
                                continue;
                            }
                            let gm = g.data()[(bi * m + mi) * frames + f] / e;
                            if gm == 0.0 {
                                continue;
                            }
                            any = true;
                            for (a, w) in gmag.iter_mut().zip(row) {
                                *a += gm * w;
                            }
                        }
                        if !any {
                            continue;
                        }
                        let spec = &specs[bi * frames + f];
                        let gbins: Vec<Complex<f64>> = spec
                            .iter()
                            .zip(&gmag)
                            .map(|(c, &ga)| {
                                let n = c.norm();
                                if n > 0.0 {
                                    Complex::new(ga * c.re / n, ga * c.im / n)
                                } else {
                                    Complex::new(0.0, 0.0)
                                }
                            })
                            .collect();
                        let df = sp.frame_adjoint(&gbins);
                        let start = bi * l + f * sp.hop;
                        for (d, v) in dx[start..start + sp.n_fft].iter_mut().zip(df) {
                            *d += v;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![bsz, l], dx))]
            }
        })
    }

    /// `[B, L] -> [B, 2, frames, bins]` with real and imaginary parts as channels.
    pub fn stft(self, plan: Arc<SpectralPlan>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "stft wants [B, L]");
        let (bsz, l) = (x.dim(0), x.dim(1));
        let frames = plan.n_frames(l).expect("stft: signal shorter than one window");
        let bins = plan.n_bins();
        let plane = frames * bins;
        let mut out = vec![0.0; bsz * 2 * plane];
        for bi in 0..bsz {
            let xb = &x.data()[bi * l..(bi + 1) * l];
            for f in 0..frames {
                let spec = plan.frame_spectrum(xb, f * plan.hop);
                for (k, c) in spec.iter().enumerate() {
                    out[bi * 2 * plane + f * bins + k] = c.re;
                    out[bi * 2 * plane + plane + f * bins + k] = c.im;
                }
            }
        }
        self.graph.op(Tensor::new(vec![bsz, 2, frames, bins], out), &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let mut dx = vec![0.0; bsz * l];
                for bi in 0..bsz {
                    for f in 0..frames {
                        let gbins: Vec<Complex<f64>> = (0..bins)
                            .map(|k| {
                                Complex::new(
                                    g.data()[bi * 2 * plane + f * bins + k],
                                    g.data()[bi * 2 * plane + plane + f * bins + k],
                                )
                            })
                            .collect();
                        let df = plan.frame_adjoint(&gbins);
                        let start = bi * l + f * plan.hop;
                        for (d, v) in dx[start..start + plan.n_fft].iter_mut().zip(df) {
                            *d += v;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![bsz, l], dx))]
            }
        })
    }
}
