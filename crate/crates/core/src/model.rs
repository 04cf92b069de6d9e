//! The assembled codec and its training objective.
//!
//! [`MusaModel`] owns two parameter stores (generator and discriminators) and
//! the quantizer bank. The generator store holds the speech encoder, speaker
//! encoder, speaker classifier and decoder.

use std::rc::Rc;

use musa_autograd::{Bound, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TrainingConfig};
use crate::dsp::Waveform;
use crate::encoders::{
    add_speaker, encode_speaker_vector, encode_speech_frames, speaker_distillation_loss, subtract_speaker, FrameRepresentation,
    SpeakerEmbedding, SpeakerEncoder, SpeakerEncoderShape, SpeechEncoder,
};
use crate::error::{MusaError, Result};
use crate::gan::{
    discriminator_loss, feature_matching_loss, generator_adv_loss, reconstruction_terms, Decoder, DiscriminatorSet,
};
use crate::nn::Linear;
use crate::rvq::{CodeSequence, EmaSettings, QuantizedRepresentation, QuantizerBank, RvqOutput};

/// The six weighted terms of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    Reconstruction,
    Adversarial,
    FeatureMatching,
    Commitment,
    Speaker,
    Semantic,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Reconstruction,
        LossTerm::Adversarial,
        LossTerm::FeatureMatching,
        LossTerm::Commitment,
        LossTerm::Speaker,
        LossTerm::Semantic,
    ];

    /// Name used in loss logs and diagnostics.
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Reconstruction => "rec",
            LossTerm::Adversarial => "adv",
            LossTerm::FeatureMatching => "fm",
            LossTerm::Commitment => "com",
            LossTerm::Speaker => "spk",
            LossTerm::Semantic => "sem",
        }
    }

    pub fn weight(self, t: &TrainingConfig) -> f64 {
        match self {
            LossTerm::Reconstruction => t.lambda_r,
            LossTerm::Adversarial => t.lambda_a,
            LossTerm::FeatureMatching => t.lambda_f,
            LossTerm::Commitment => t.lambda_c,
            LossTerm::Speaker => t.lambda_s,
            LossTerm::Semantic => t.lambda_m,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Plain values of the generator terms, any of which may be missing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermValues([Option<f64>; 6]);

impl TermValues {
    pub fn all(v: f64) -> Self {
        Self([Some(v); 6])
    }

    pub fn set(&mut self, term: LossTerm, v: f64) {
        self.0[term.index()] = Some(v);
    }

    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.0[term.index()]
    }

    pub fn clear(&mut self, term: LossTerm) {
        self.0[term.index()] = None;
    }
}

/// `Σ λ_k L_k` in a fixed term order. A term whose weight is zero is left out
/// of the sum entirely (its value may be absent); any other absent term is an
/// error.
pub fn total_generator_loss(values: &TermValues, weights: &TrainingConfig) -> Result<f64> {
    let mut total = 0.0;
    for term in LossTerm::ALL {
        let w = term.weight(weights);
        if w == 0.0 {
            continue;
        }
        let v = values.get(term).ok_or_else(|| MusaError::MissingTerm(term.name().into()))?;
        total += w * v;
    }
    Ok(total)
}

/// Tape version of [`total_generator_loss`] over the terms that were built.
pub fn weighted_total<'g>(terms: &[(LossTerm, Var<'g>)], weights: &TrainingConfig) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for term in LossTerm::ALL {
        let w = term.weight(weights);
        if w == 0.0 {
            continue;
        }
        let v = terms
            .iter()
            .find(|(t, _)| *t == term)
            .map(|(_, v)| *v)
            .ok_or_else(|| MusaError::MissingTerm(term.name().into()))?;
        let scaled = v.scale(w);
        total = Some(match total {
            Some(t) => t.add(scaled),
            None => scaled,
        });
    }
    total.ok_or_else(|| MusaError::MissingTerm("every loss weight is zero".into()))
}

/// One training batch: equal-length crops plus two speaker segments, a label
/// and aligned teacher tokens per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub crops: Vec<Vec<f64>>,
    pub seg1: Vec<Vec<f64>>,
    pub seg2: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// One token per codec frame of the matching crop.
    pub tokens: Vec<Vec<usize>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    fn check(&self, hop: usize, num_speakers: usize, classes: usize) -> Result<usize> {
        let b = self.crops.len();
        if b == 0 {
            return Err(MusaError::InsufficientData("empty batch".into()));
        }
        for n in [self.seg1.len(), self.seg2.len(), self.labels.len(), self.tokens.len()] {
            if n != b {
                return Err(MusaError::LengthMismatch { left: b, right: n });
            }
        }
        let l = self.crops[0].len();
        if l == 0 || l % hop != 0 {
            return Err(MusaError::InvalidInput(format!("crop length {l} is not a positive multiple of {hop}")));
        }
        if let Some(c) = self.crops.iter().find(|c| c.len() != l) {
            return Err(MusaError::LengthMismatch { left: l, right: c.len() });
        }
        let t = l / hop;
        for (tok, &label) in self.tokens.iter().zip(&self.labels) {
            if tok.len() != t {
                return Err(MusaError::LengthMismatch { left: t, right: tok.len() });
            }
            if let Some(&bad) = tok.iter().find(|&&k| k >= classes) {
                return Err(MusaError::TokenOutOfRange { token: bad, classes });
            }
            if label >= num_speakers {
                return Err(MusaError::LabelOutOfRange { label, num_speakers });
            }
        }
        Ok(t)
    }
}

/// Quantization of one batch, held fixed while the tape is evaluated: the
/// straight-through offset `Q − r1` and the quantizer pass behind it.
#[derive(Debug, Clone)]
pub struct FrozenQuantization {
    pub offset: Tensor,
    pub rvq: RvqOutput,
}

/// Generator-side tape of one batch, before the adversarial terms.
pub struct GeneratorPass<'g> {
    /// `[B, 1, L]` target crops.
    pub x: Var<'g>,
    /// `[B, 1, L]` reconstruction.
    pub x_hat: Var<'g>,
    /// Every non-adversarial term with a non-zero weight.
    pub terms: Vec<(LossTerm, Var<'g>)>,
    /// Log-mel L1 plus L2 part of the reconstruction term, for monitoring.
    pub mel: f64,
    pub quant: FrozenQuantization,
}

/// Everything the analysis half of the codec computes for one waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub x: FrameRepresentation,
    pub s: SpeakerEmbedding,
    pub r1: FrameRepresentation,
    pub codes: CodeSequence,
    pub quantized: QuantizedRepresentation,
}

#[derive(Debug)]
pub struct MusaModel {
    pub config: ModelConfig,
    pub num_speakers: usize,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub bank: QuantizerBank,
    encoder: SpeechEncoder,
    speaker: SpeakerEncoder,
    classifier: Linear,
    decoder: Decoder,
    discs: DiscriminatorSet,
}

/// `[B, d, t]` tensor data to frame-major rows `[B·t, d]`.
fn to_rows(v: &Tensor) -> Vec<f64> {
    let (b, d, t) = (v.dim(0), v.dim(1), v.dim(2));
    let mut rows = vec![0.0; b * d * t];
    for bi in 0..b {
        for c in 0..d {
            for j in 0..t {
                rows[(bi * t + j) * d + c] = v.data()[(bi * d + c) * t + j];
            }
        }
    }
    rows
}

fn from_rows(rows: &[f64], b: usize, d: usize, t: usize) -> Tensor {
    let mut v = vec![0.0; b * d * t];
    for bi in 0..b {
        for c in 0..d {
            for j in 0..t {
                v[(bi * d + c) * t + j] = rows[(bi * t + j) * d + c];
            }
        }
    }
    Tensor::new(vec![b, d, t], v)
}

impl MusaModel {
    /// Freshly initialized model; parameters depend only on `seed`.
    pub fn new(config: &ModelConfig, num_speakers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_speakers == 0 {
            return Err(MusaError::InsufficientData("need at least one speaker".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator = ParamStore::new();
        let encoder = SpeechEncoder::new(&mut generator, config, &mut rng);
        let speaker = SpeakerEncoder::new(&mut generator, &SpeakerEncoderShape::from(config), &mut rng);
        let classifier = Linear::new(&mut generator, "cls", config.latent_dim, num_speakers, true, &mut rng);
        let decoder = Decoder::new(&mut generator, config, &mut rng);
        let mut discriminator = ParamStore::new();
        let discs = DiscriminatorSet::new(&mut discriminator, config, &mut rng);
        let ema = EmaSettings {
            decay: config.ema_decay,
            epsilon: config.ema_epsilon,
            dead_after: config.dead_code_steps,
        };
        Ok(Self {
            config: config.clone(),
            num_speakers,
            generator,
            discriminator,
            bank: QuantizerBank::new(config.num_quantizers, config.codebook_size, config.latent_dim, ema),
            encoder,
            speaker,
            classifier,
            decoder,
            discs,
        })
    }

    pub fn hop(&self) -> usize {
        self.config.hop()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    fn encode_batch<'g>(&self, g: &'g Graph, p: &Bound<'g>, batch: &TrainBatch) -> Result<(Var<'g>, Var<'g>, Var<'g>, Var<'g>)> {
        let l = batch.crops[0].len();
        let data: Vec<f64> = batch.crops.iter().flatten().copied().collect();
        let x = g.constant(Tensor::new(vec![batch.len(), 1, l], data));
        let xe = self.encoder.forward(p, x);
        let seg1: Vec<&[f64]> = batch.seg1.iter().map(Vec::as_slice).collect();
        let seg2: Vec<&[f64]> = batch.seg2.iter().map(Vec::as_slice).collect();
        let s1 = self.speaker.forward_waves(p, g, &seg1)?;
        let s2 = self.speaker.forward_waves(p, g, &seg2)?;
        Ok((x, xe.sub_time(s1), s1, s2))
    }

    /// Frame-major bottleneck inputs `r1` of a batch, off the tape. Used to
    /// initialize the codebooks from the first batch.
    pub fn latent_rows(&self, batch: &TrainBatch) -> Result<Vec<f64>> {
        batch.check(self.hop(), self.num_speakers, self.bank.codebook_size())?;
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let (_, r1, _, _) = self.encode_batch(&g, &p, batch)?;
        Ok(to_rows(&r1.value()))
    }

    /// Builds the generator tape for one batch. Only terms with a non-zero
    /// weight are constructed, so a zero-weight term contributes nothing to
    /// any gradient. With `frozen`, the given quantization replaces the live
    /// one (the tape is then a smooth function of the parameters).
    pub fn generator_pass<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        batch: &TrainBatch,
        weights: &TrainingConfig,
        frozen: Option<FrozenQuantization>,
    ) -> Result<GeneratorPass<'g>> {
        let t = batch.check(self.hop(), self.num_speakers, self.bank.codebook_size())?;
        if !self.bank.is_initialized() && frozen.is_none() {
            return Err(MusaError::InvalidInput("quantizer bank is not initialized".into()));
        }
        let (b, d) = (batch.len(), self.latent_dim());
        let (x, r1, s1, s2) = self.encode_batch(g, p, batch)?;
        let r1v = r1.value();
        let quant = match frozen {
            Some(f) => f,
            None => {
                let rvq = self.bank.quantize_rows(&to_rows(&r1v))?;
                let total = from_rows(&rvq.total, b, d, t);
                FrozenQuantization {
                    offset: total.zip_map(&r1v, |q, r| q - r),
                    rvq,
                }
            }
        };
        // Straight-through: the value is the quantized sum, the gradient is
        // the identity onto r1.
        let z = r1.add(g.constant(quant.offset.clone()));
        let x_hat = self.decoder.forward(p, z.add_time(s1));
        let l = batch.crops[0].len();
        let rec = reconstruction_terms(x.reshape(vec![b, l]), x_hat.reshape(vec![b, l]));
        let mel = rec.mel_l1.item() + rec.mel_l2.item();

        let mut terms = Vec::new();
        if weights.lambda_r != 0.0 {
            terms.push((LossTerm::Reconstruction, rec.total()));
        }
        if weights.lambda_c != 0.0 {
            // Layer i compares its input r1 − P_{i−1} with q_i, which is
            // r1 − P_i: the partial sum through layer i, held constant.
            let mut partial = vec![0.0; quant.rvq.total.len()];
            let mut com: Option<Var<'g>> = None;
            for q in &quant.rvq.quantized {
                partial.iter_mut().zip(q).for_each(|(a, v)| *a += v);
                let diff = r1.sub(g.constant(from_rows(&partial, b, d, t))).square().sum();
                com = Some(com.map_or(diff, |c| c.add(diff)));
            }
            let com = com.expect("at least one quantizer").scale(1.0 / (b * t) as f64);
            terms.push((LossTerm::Commitment, com));
        }
        if weights.lambda_s != 0.0 {
            terms.push((LossTerm::Speaker, speaker_distillation_loss(p, &self.classifier, s1, s2, &batch.labels)));
        }
        if weights.lambda_m != 0.0 {
            let cb = &self.bank.layers[0];
            let codebook = Rc::new(Tensor::new(vec![cb.size, d], cb.embeddings.clone()));
            let tokens: Vec<usize> = batch.tokens.iter().flatten().copied().collect();
            let logits = r1.swap_last2().reshape(vec![b * t, d]).neg_sq_dist(codebook);
            terms.push((LossTerm::Semantic, logits.cross_entropy(&tokens)));
        }
        Ok(GeneratorPass {
            x,
            x_hat,
            terms,
            mel,
            quant,
        })
    }

    /// Adversarial and feature-matching terms of the generator, scored by the
    /// discriminators bound in `dp` (normally as constants).
    pub fn adversarial_terms<'g>(&self, dp: &Bound<'g>, x: Var<'g>, x_hat: Var<'g>, weights: &TrainingConfig) -> Vec<(LossTerm, Var<'g>)> {
        let mut terms = Vec::new();
        if weights.lambda_a == 0.0 && weights.lambda_f == 0.0 {
            return terms;
        }
        let fake = self.discs.forward(dp, x_hat);
        if weights.lambda_a != 0.0 {
            terms.push((LossTerm::Adversarial, generator_adv_loss(&fake)));
        }
        if weights.lambda_f != 0.0 {
            let real = self.discs.forward(dp, x);
            terms.push((LossTerm::FeatureMatching, feature_matching_loss(&real, &fake)));
        }
        terms
    }

    /// Least-squares discriminator objective on real crops and (detached)
    /// reconstructions, both `[B, 1, L]`.
    pub fn discriminator_objective<'g>(&self, g: &'g Graph, dp: &Bound<'g>, x: &Tensor, x_hat: &Tensor) -> Var<'g> {
        let real = self.discs.forward(dp, g.constant(x.clone()));
        let fake = self.discs.forward(dp, g.constant(x_hat.clone()));
        discriminator_loss(&real, &fake)
    }

    pub fn encode(&self, w: &Waveform) -> Result<FrameRepresentation> {
        encode_speech_frames(&self.encoder, &self.generator, w, self.latent_dim())
    }

    pub fn embed_speaker(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        encode_speaker_vector(&self.speaker, &self.generator, w)
    }

    /// Speaker-encoder embeddings of a batch of equal-purpose segments.
    pub fn embed_segments(&self, segments: &[&[f64]]) -> Result<Vec<SpeakerEmbedding>> {
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let s = self.speaker.forward_waves(&p, &g, segments)?.value();
        let d = self.latent_dim();
        Ok(s.data().chunks(d).map(|r| SpeakerEmbedding::new(r.to_vec())).collect())
    }

    /// Arg-max of the speaker classifier on an embedding.
    pub fn classify(&self, s: &SpeakerEmbedding) -> Result<usize> {
        if s.dim() != self.latent_dim() {
            return Err(MusaError::DimensionMismatch {
                expected: self.latent_dim(),
                got: s.dim(),
            });
        }
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let logits = self.classifier.forward(&p, g.constant(Tensor::new(vec![1, s.dim()], s.values().to_vec())));
        let v = logits.value();
        Ok(v.data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0)
    }

    pub fn analyze(&self, w: &Waveform) -> Result<Analysis> {
        let x = self.encode(w)?;
        let s = self.embed_speaker(w)?;
        let r1 = subtract_speaker(&x, &s)?;
        let (codes, quantized) = self.bank.quantize(&r1)?;
        Ok(Analysis { x, s, r1, codes, quantized })
    }

    /// Decoder output for `content_prosody + s`, `t · hop` samples long.
    pub fn decode(&self, content_prosody: &FrameRepresentation, s: &SpeakerEmbedding) -> Result<Waveform> {
        let z = add_speaker(content_prosody, s)?;
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let y = self.decoder.forward(&p, g.constant(z.to_tensor()));
        Waveform::new(y.value().data().to_vec())
    }

    /// Plain resynthesis with the input's own speaker embedding.
    pub fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        let a = self.analyze(w)?;
        self.decode(&a.quantized.total, &a.s)
    }
}
