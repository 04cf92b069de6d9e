//! Waveform decoder (the encoder mirrored with transposed convolutions), the
//! multi-period, multi-scale and multi-resolution STFT discriminators, and the
//! reconstruction, least-squares adversarial and feature-matching losses.
//!
//! All norms are mean-reduced over elements; adversarial and feature-matching
//! terms are summed over sub-discriminators.

use std::sync::Arc;

use musa_autograd::spectral::SpectralPlan;
use musa_autograd::{Bound, Conv1dCfg, Conv2dCfg, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::dsp::{mel_plan, MEL_N_FFT};
use crate::error::{MusaError, Result};
use crate::nn::{Conv1d, Conv2d, ResidualLstm, ResidualUnit, Upsample1d};

const LRELU: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Decoder {
    input: Conv1d,
    lstm: ResidualLstm,
    blocks: Vec<(Upsample1d, ResidualUnit)>,
    output: Conv1d,
    latent_dim: usize,
    hop: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut ch = cfg.top_channels();
        let input = Conv1d::new(store, "dec.in", cfg.latent_dim, ch, 7, Conv1dCfg::same(7), rng);
        let lstm = ResidualLstm::new(store, "dec.lstm", ch, cfg.lstm_layers, rng);
        let blocks = cfg
            .strides
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &s)| {
                let up = Upsample1d::new(store, &format!("dec.b{i}.up"), ch, ch / 2, s, rng);
                ch /= 2;
                (up, ResidualUnit::new(store, &format!("dec.b{i}.res"), ch, rng))
            })
            .collect();
        let output = Conv1d::new(store, "dec.out", ch, 1, 7, Conv1dCfg::same(7), rng);
        Self {
            input,
            lstm,
            blocks,
            output,
            latent_dim: cfg.latent_dim,
            hop: cfg.hop(),
        }
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// `[B, d, t]` to `[B, 1, t * hop]` in `(-1, 1)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Var<'g> {
        assert_eq!(z.shape()[1], self.latent_dim, "decoder latent width");
        let mut h = self.input.forward(p, z);
        h = self.lstm.forward(p, h);
        for (up, unit) in &self.blocks {
            h = unit.forward(p, up.forward(p, h.elu()));
        }
        self.output.forward(p, h.elu()).tanh()
    }
}

/// Final score map plus every intermediate activation of one sub-discriminator.
pub struct DiscOutput<'g> {
    pub score: Var<'g>,
    pub features: Vec<Var<'g>>,
}

#[derive(Debug, Clone)]
struct PeriodDisc {
    period: usize,
    convs: Vec<Conv2d>,
    post: Conv2d,
}

impl PeriodDisc {
    fn new(store: &mut ParamStore, period: usize, c: usize, rng: &mut impl Rng) -> Self {
        let name = format!("mpd.p{period}");
        let widths = [1, c, 2 * c, 4 * c];
        let mut convs: Vec<Conv2d> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(store, &format!("{name}.c{i}"), w[0], w[1], (5, 1), Conv2dCfg::new((3, 1), (2, 0)), rng))
            .collect();
        convs.push(Conv2d::new(store, &format!("{name}.c3"), 4 * c, 4 * c, (5, 1), Conv2dCfg::new((1, 1), (2, 0)), rng));
        let post = Conv2d::new(store, &format!("{name}.post"), 4 * c, 1, (3, 1), Conv2dCfg::new((1, 1), (1, 0)), rng);
        Self { period, convs, post }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> DiscOutput<'g> {
        let s = x.shape();
        let (b, l) = (s[0], s[2]);
        let pad = (self.period - l % self.period) % self.period;
        let mut h = x.pad_last(0, pad).reshape(vec![b, 1, (l + pad) / self.period, self.period]);
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(p, h).leaky_relu(LRELU);
            features.push(h);
        }
        let score = self.post.forward(p, h);
        features.push(score);
        DiscOutput { score, features }
    }
}

#[derive(Debug, Clone)]
struct ScaleDisc {
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl ScaleDisc {
    fn new(store: &mut ParamStore, idx: usize, c: usize, rng: &mut impl Rng) -> Self {
        let name = format!("msd.s{idx}");
        let specs = [
            (1, c, 15, Conv1dCfg::same(15)),
            (c, 2 * c, 11, Conv1dCfg::strided(4, 5, 5)),
            (2 * c, 2 * c, 11, Conv1dCfg::strided(4, 5, 5)),
            (2 * c, 2 * c, 5, Conv1dCfg::same(5)),
        ];
        let convs = specs
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k, cfg))| Conv1d::new(store, &format!("{name}.c{i}"), ci, co, k, cfg, rng))
            .collect();
        let post = Conv1d::new(store, &format!("{name}.post"), 2 * c, 1, 3, Conv1dCfg::same(3), rng);
        Self { convs, post }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> DiscOutput<'g> {
        let mut h = x;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            h = c.forward(p, h).leaky_relu(LRELU);
            features.push(h);
        }
        let score = self.post.forward(p, h);
        features.push(score);
        DiscOutput { score, features }
    }
}

struct StftDisc {
    plan: Arc<SpectralPlan>,
    convs: Vec<Conv2d>,
    post: Conv2d,
}

impl std::fmt::Debug for StftDisc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftDisc").field("n_fft", &self.plan.n_fft()).finish()
    }
}

impl StftDisc {
    fn new(store: &mut ParamStore, n_fft: usize, c: usize, rng: &mut impl Rng) -> Self {
        let name = format!("stft.n{n_fft}");
        let mut convs = vec![Conv2d::new(store, &format!("{name}.c0"), 2, c, (3, 9), Conv2dCfg::new((1, 1), (1, 4)), rng)];
        for i in 1..3 {
            convs.push(Conv2d::new(store, &format!("{name}.c{i}"), c, c, (3, 9), Conv2dCfg::new((1, 2), (1, 4)), rng));
        }
        convs.push(Conv2d::new(store, &format!("{name}.c3"), c, c, (3, 3), Conv2dCfg::new((1, 1), (1, 1)), rng));
        let post = Conv2d::new(store, &format!("{name}.post"), c, 1, (3, 3), Conv2dCfg::new((1, 1), (1, 1)), rng);
        Self {
            plan: Arc::new(SpectralPlan::hann(n_fft, n_fft / 4)),
            convs,
            post,
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> DiscOutput<'g> {
        let s = x.shape();
        let n_fft = self.plan.n_fft();
        let (b, l) = (s[0], s[2]);
        // Signals shorter than one window are zero-padded to a single frame.
        let flat = x.reshape(vec![b, l]).pad_last(0, n_fft.saturating_sub(l));
        let mut h = flat.stft(self.plan.clone()).scale(1.0 / (n_fft as f64).sqrt());
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            h = c.forward(p, h).leaky_relu(LRELU);
            features.push(h);
        }
        let score = self.post.forward(p, h);
        features.push(score);
        DiscOutput { score, features }
    }
}

/// All sub-discriminators, with their own parameter store.
#[derive(Debug)]
pub struct DiscriminatorSet {
    mpd: Vec<PeriodDisc>,
    msd: Vec<ScaleDisc>,
    stft: Vec<StftDisc>,
}

impl DiscriminatorSet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.disc_channels;
        Self {
            mpd: cfg.mpd_periods.iter().map(|&p| PeriodDisc::new(store, p, c, rng)).collect(),
            msd: (0..cfg.msd_scales).map(|i| ScaleDisc::new(store, i, c, rng)).collect(),
            stft: cfg.stft_ffts.iter().map(|&n| StftDisc::new(store, n, c, rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mpd.len() + self.msd.len() + self.stft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs every sub-discriminator on `x: [B, 1, L]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Vec<DiscOutput<'g>> {
        let mut outs = Vec::with_capacity(self.len());
        for d in &self.mpd {
            outs.push(d.forward(p, x));
        }
        let mut scaled = x;
        for (i, d) in self.msd.iter().enumerate() {
            if i > 0 {
                scaled = scaled.avg_pool1d(4, 2, 2);
            }
            outs.push(d.forward(p, scaled));
        }
        for d in &self.stft {
            outs.push(d.forward(p, x));
        }
        outs
    }
}

/// Time-domain L1, log-mel L1 and log-mel L2 terms, each mean-reduced.
pub struct ReconstructionTerms<'g> {
    pub time: Var<'g>,
    pub mel_l1: Var<'g>,
    pub mel_l2: Var<'g>,
}

impl<'g> ReconstructionTerms<'g> {
    pub fn total(&self) -> Var<'g> {
        self.time.add(self.mel_l1).add(self.mel_l2)
    }
}

/// `x`, `x_hat`: `[B, L]`. Signals shorter than one mel window are
/// zero-padded to one window for the spectral terms.
pub fn reconstruction_terms<'g>(x: Var<'g>, x_hat: Var<'g>) -> ReconstructionTerms<'g> {
    assert_eq!(x.shape(), x_hat.shape(), "reconstruction_loss length mismatch");
    let time = x.sub(x_hat).abs().mean();
    let l = x.shape()[1];
    let pad = MEL_N_FFT.saturating_sub(l);
    let plan = mel_plan();
    let mx = x.pad_last(0, pad).log_mel(plan.clone());
    let my = x_hat.pad_last(0, pad).log_mel(plan);
    let diff = mx.sub(my);
    ReconstructionTerms {
        time,
        mel_l1: diff.abs().mean(),
        mel_l2: diff.square().mean(),
    }
}

/// Plain-value reconstruction loss of two equal-length signals.
pub fn reconstruction_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(MusaError::LengthMismatch {
            left: x.len(),
            right: x_hat.len(),
        });
    }
    if x.is_empty() {
        return Err(MusaError::EmptyAudio);
    }
    let g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, x.len()], x.to_vec()));
    let b = g.constant(Tensor::new(vec![1, x.len()], x_hat.to_vec()));
    Ok(reconstruction_terms(a, b).total().item())
}

/// `Σ_k mean((D_k(x) − 1)²) + mean(D_k(x̂)²)`.
pub fn discriminator_loss<'g>(real: &[DiscOutput<'g>], fake: &[DiscOutput<'g>]) -> Var<'g> {
    real.iter()
        .zip(fake)
        .map(|(r, f)| r.score.add_scalar(-1.0).square().mean().add(f.score.square().mean()))
        .reduce(|a, b| a.add(b))
        .expect("at least one discriminator")
}

/// `Σ_k mean((D_k(x̂) − 1)²)`.
pub fn generator_adv_loss<'g>(fake: &[DiscOutput<'g>]) -> Var<'g> {
    fake.iter()
        .map(|f| f.score.add_scalar(-1.0).square().mean())
        .reduce(|a, b| a.add(b))
        .expect("at least one discriminator")
}

/// `Σ_k Σ_l mean|f_real − f_fake|`, with real features treated as constants.
pub fn feature_matching_loss<'g>(real: &[DiscOutput<'g>], fake: &[DiscOutput<'g>]) -> Var<'g> {
    real.iter()
        .zip(fake)
        .flat_map(|(r, f)| r.features.iter().zip(&f.features))
        .map(|(a, b)| a.detach().sub(*b).abs().mean())
        .reduce(|a, b| a.add(b))
        .expect("at least one feature map")
}
