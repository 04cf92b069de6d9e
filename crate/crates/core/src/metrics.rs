//! Privacy and utility measures: equal error rate over verification trials,
//! word error rate, pitch correlation, voice similarity matrices and the gain
//! of voice distinctiveness, plus the scorers that feed them.

use std::borrow::Borrow;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ScoringConfig;
use crate::dsp::{mel_spectrogram, PitchTrack, Waveform, N_MELS};
use crate::error::{MusaError, Result};
use crate::model::MusaModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub is_target: bool,
}

/// Equal error rate and the threshold at which it is reached. A trial is
/// accepted when `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Sweeps the threshold over every distinct score. Between adjacent sweep
/// points the false-acceptance and false-rejection rates are joined linearly
/// and the EER is read at their crossing.
pub fn compute_eer(trials: &[TrialScore]) -> Result<EerResult> {
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(MusaError::InvalidInput(format!("non-finite score for {} / {}", t.enroll_id, t.test_id)));
    }
    let mut tar: Vec<f64> = trials.iter().filter(|t| t.is_target).map(|t| t.score).collect();
    let mut non: Vec<f64> = trials.iter().filter(|t| !t.is_target).map(|t| t.score).collect();
    if tar.is_empty() || non.is_empty() {
        return Err(MusaError::InsufficientData(format!(
            "EER needs target and non-target trials, got {} and {}",
            tar.len(),
            non.len()
        )));
    }
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    // Rates at threshold th: targets strictly below are rejected, non-targets
    // at or above are accepted.
    let rates = |th: f64| {
        let frr = tar.partition_point(|&s| s < th) as f64 / nt;
        let far = (non.len() - non.partition_point(|&s| s < th)) as f64 / nn;
        (far, frr)
    };
    let mut prev = (thresholds[0], rates(thresholds[0]));
    for &th in thresholds.iter().skip(1) {
        let cur = (th, rates(th));
        if let Some(r) = crossing(prev, cur) {
            return Ok(r);
        }
        prev = cur;
    }
    // Above the top score nothing is accepted: FAR 0, FRR 1.
    let (th, (far, frr)) = prev;
    let d0 = frr - far;
    let a = if d0 >= 0.0 { 0.0 } else { -d0 / (1.0 - d0) };
    Ok(EerResult {
        eer: far + a * (0.0 - far),
        threshold: th,
    })
}

type SweepPoint = (f64, (f64, f64));

fn crossing((t0, (far0, frr0)): SweepPoint, (t1, (far1, frr1)): SweepPoint) -> Option<EerResult> {
    let d0 = frr0 - far0;
    let d1 = frr1 - far1;
    if d0 > 0.0 || d1 < 0.0 {
        return None;
    }
    let a = if d0 == d1 { 0.0 } else { d0 / (d0 - d1) };
    Some(EerResult {
        eer: far0 + a * (far1 - far0),
        threshold: t0 + a * (t1 - t0),
    })
}

pub fn trials_to_tsv(trials: &[TrialScore]) -> String {
    let mut out = String::new();
    for t in trials {
        let kind = if t.is_target { "target" } else { "nontarget" };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", t.enroll_id, t.test_id, t.score, kind);
    }
    out
}

fn parse_kind(s: &str, path: &Path, line: usize) -> Result<bool> {
    match s {
        "target" => Ok(true),
        "nontarget" => Ok(false),
        other => Err(MusaError::Parse {
            path: path.into(),
            line,
            msg: format!("trial kind must be target or nontarget, got {other:?}"),
        }),
    }
}

/// `enroll<TAB>test<TAB>score<TAB>target|nontarget` per line.
pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<TrialScore>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| MusaError::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        if f.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", f.len())));
        }
        let score: f64 = f[2].trim().parse().map_err(|_| bad(format!("bad score {:?}", f[2])))?;
        out.push(TrialScore {
            enroll_id: f[0].into(),
            test_id: f[1].into(),
            score,
            is_target: parse_kind(f[3].trim(), path, i + 1)?,
        });
    }
    Ok(out)
}

/// Unscored trial: enrollment and test utterance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    pub enroll_id: String,
    pub test_id: String,
    pub is_target: bool,
}

/// `enroll<TAB>test<TAB>target|nontarget` per line.
pub fn parse_trial_keys(text: &str, path: &Path) -> Result<Vec<TrialKey>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(MusaError::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, got {}", f.len()),
            });
        }
        out.push(TrialKey {
            enroll_id: f[0].into(),
            test_id: f[1].into(),
            is_target: parse_kind(f[2].trim(), path, i + 1)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WerUnit {
    Word,
    Char,
}

impl std::str::FromStr for WerUnit {
    type Err = MusaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            other => Err(MusaError::InvalidInput(format!("unit must be word or char, got {other:?}"))),
        }
    }
}

/// Whitespace tokens, or non-whitespace characters.
pub fn tokenize(text: &str, unit: WerUnit) -> Vec<String> {
    match unit {
        WerUnit::Word => text.split_whitespace().map(str::to_string).collect(),
        WerUnit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

/// `(S + D + I) / N` from a minimum-cost alignment, `N` the reference length.
pub fn compute_wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerResult> {
    let (n, m) = (reference.len(), hypothesis.len());
    if n == 0 {
        return Err(MusaError::InsufficientData("empty reference".into()));
    }
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            cost[i * w + j] = sub.min(cost[(i - 1) * w + j] + 1).min(cost[i * w + j - 1] + 1);
        }
    }
    let (mut s, mut d, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if here == cost[(i - 1) * w + j - 1] + usize::from(!same) {
                s += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerResult {
        wer: (s + d + ins) as f64 / n as f64,
        substitutions: s,
        deletions: d,
        insertions: ins,
        reference_len: n,
    })
}

/// Pearson correlation of F0 over frames voiced in both tracks.
pub fn pitch_correlation(a: &PitchTrack, b: &PitchTrack) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MusaError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let pairs: Vec<(f64, f64)> = a
        .f0_hz
        .iter()
        .zip(&a.voiced)
        .zip(b.f0_hz.iter().zip(&b.voiced))
        .filter(|((_, &va), (_, &vb))| va && vb)
        .map(|((&fa, _), (&fb, _))| (fa, fb))
        .collect();
    pearson(&pairs)
}

/// Errors on fewer than two pairs or a constant side.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(MusaError::InsufficientData(format!("{} jointly voiced frames", pairs.len())));
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MusaError::InvalidInput("pitch has zero variance over the voiced frames".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Fixed-length utterance representation for scoring.
pub trait SpeakerEmbedder: Sync {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>>;
}

/// Per-band mean and standard deviation of the log-mel spectrogram.
#[derive(Debug, Clone, Copy, Default)]
pub struct MelStatsEmbedder;

impl SpeakerEmbedder for MelStatsEmbedder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let mel = mel_spectrogram(w)?;
        let means = mel.band_means();
        let mut out = means.clone();
        for (row, m) in mel.values.chunks(mel.frames).zip(&means) {
            out.push((row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / mel.frames as f64).sqrt());
        }
        Ok(out)
    }
}

/// The codec's own speaker encoder, owned or borrowed.
pub struct ModelEmbedder<M>(pub M);

impl<M: Borrow<MusaModel> + Sync> SpeakerEmbedder for ModelEmbedder<M> {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        Ok(self.0.borrow().embed_speaker(w)?.values().to_vec())
    }
}

/// Cosine similarity; zero when either side is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MusaError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) })
}

/// Verification score for an utterance pair.
pub trait ScoreProvider: Sync {
    /// Whatever `score_prepared` consumes, computed once per utterance.
    fn prepare(&self, w: &Waveform) -> Result<Vec<f64>>;
    fn score_prepared(&self, a: &[f64], b: &[f64]) -> Result<f64>;

    fn score(&self, a: &Waveform, b: &Waveform) -> Result<f64> {
        self.score_prepared(&self.prepare(a)?, &self.prepare(b)?)
    }
}

/// `scale · cos(e_a, e_b) + offset`, an LLR-like score from any embedder.
pub struct CosineScorer<E> {
    pub embedder: E,
    pub scale: f64,
    pub offset: f64,
}

impl<E: SpeakerEmbedder> CosineScorer<E> {
    pub fn new(embedder: E, cfg: &ScoringConfig) -> Self {
        Self {
            embedder,
            scale: cfg.llr_scale,
            offset: cfg.llr_offset,
        }
    }
}

impl<E: SpeakerEmbedder> ScoreProvider for CosineScorer<E> {
    fn prepare(&self, w: &Waveform) -> Result<Vec<f64>> {
        self.embedder.embed(w)
    }

    fn score_prepared(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(self.scale * cosine(a, b)? + self.offset)
    }
}

/// Per-band mean log-mel over the louder half of the frames. Pauses and
/// quiet transitions carry little about the voice and are left out.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoudSpectrumEmbedder;

impl SpeakerEmbedder for LoudSpectrumEmbedder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let mel = mel_spectrogram(w)?;
        let energy: Vec<f64> = (0..mel.frames).map(|t| (0..N_MELS).map(|b| mel.at(b, t).exp()).sum()).collect();
        let mut order: Vec<usize> = (0..mel.frames).collect();
        order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]));
        let keep = &order[..mel.frames.div_ceil(2)];
        Ok((0..N_MELS)
            .map(|b| keep.iter().map(|&t| mel.at(b, t)).sum::<f64>() / keep.len() as f64)
            .collect())
    }
}

/// Cosine scoring of [`LoudSpectrumEmbedder`] vectors after subtracting
/// their mean over a reference set. Without the centering every spectrum
/// points the same way and all cosines sit near one.
pub struct CenteredSpectrumScorer {
    pub mean: Vec<f64>,
    pub scale: f64,
    pub offset: f64,
}

impl CenteredSpectrumScorer {
    pub fn fit(reference: &[Waveform], cfg: &ScoringConfig) -> Result<Self> {
        if reference.len() < 2 {
            return Err(MusaError::InsufficientData("centering needs at least two utterances".into()));
        }
        let feats: Vec<Vec<f64>> = reference.iter().map(|w| LoudSpectrumEmbedder.embed(w)).collect::<Result<_>>()?;
        let n = feats.len() as f64;
        let mean = (0..N_MELS).map(|b| feats.iter().map(|f| f[b]).sum::<f64>() / n).collect();
        Ok(Self {
            mean,
            scale: cfg.llr_scale,
            offset: cfg.llr_offset,
        })
    }
}

impl ScoreProvider for CenteredSpectrumScorer {
    fn prepare(&self, w: &Waveform) -> Result<Vec<f64>> {
        let e = LoudSpectrumEmbedder.embed(w)?;
        Ok(e.iter().zip(&self.mean).map(|(v, m)| v - m).collect())
    }

    fn score_prepared(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(self.scale * cosine(a, b)? + self.offset)
    }
}

fn standardization(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows.len() < 2 {
        return Err(MusaError::InsufficientData("normalization needs at least two utterances".into()));
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // Floor keeps silent bands from blowing up.
    let std = std.into_iter().map(|v| v.sqrt().max(1e-3)).collect();
    Ok((mean, std))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Speaker-by-speaker matrix of `sigmoid(mean LLR)` over utterance pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub speakers: Vec<String>,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.speakers.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// Header row and first column carry speaker names.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("speaker");
        for s in &self.speakers {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (i, s) in self.speakers.iter().enumerate() {
            out.push_str(s);
            for j in 0..self.n() {
                let _ = write!(out, ",{}", self.at(i, j));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| MusaError::Parse {
            path: path.into(),
            line,
            msg,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let speakers: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let n = speakers.len();
        let mut values = Vec::with_capacity(n * n);
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if i >= n || f.len() != n + 1 || f[0] != speakers[i] {
                return Err(bad(i + 2, "row does not match the header".into()));
            }
            for v in &f[1..] {
                values.push(v.parse::<f64>().map_err(|_| bad(i + 2, format!("bad value {v:?}")))?);
            }
        }
        if values.len() != n * n {
            return Err(bad(n + 1, format!("expected {n} rows")));
        }
        Ok(Self { speakers, values })
    }
}

/// Builds the matrix from per-speaker groups of prepared utterances. Cell
/// `(i, j)` averages `score(a, b)` over every utterance `a` of speaker `i`
/// and `b` of speaker `j`, leaving out self-pairs on the diagonal, then maps
/// the mean through the logistic function.
pub fn similarity_matrix<T>(
    groups: &[(String, Vec<T>)],
    score: impl Fn(&T, &T) -> Result<f64>,
) -> Result<SimilarityMatrix> {
    let n = groups.len();
    if n == 0 {
        return Err(MusaError::InsufficientData("no speakers".into()));
    }
    let mut values = vec![0.0; n * n];
    for (i, (name_i, ui)) in groups.iter().enumerate() {
        for (j, (_, uj)) in groups.iter().enumerate() {
            let (mut sum, mut count) = (0.0, 0usize);
            for (k, a) in ui.iter().enumerate() {
                for (l, b) in uj.iter().enumerate() {
                    if i == j && k == l {
                        continue;
                    }
                    sum += score(a, b)?;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(MusaError::InsufficientData(format!(
                    "speaker {name_i} needs at least two utterances for the diagonal"
                )));
            }
            values[i * n + j] = sigmoid(sum / count as f64);
        }
    }
    Ok(SimilarityMatrix {
        speakers: groups.iter().map(|g| g.0.clone()).collect(),
        values,
    })
}

/// Convenience wrapper preparing each waveform once.
pub fn similarity_from_audio(groups: &[(String, Vec<Waveform>)], scorer: &dyn ScoreProvider) -> Result<SimilarityMatrix> {
    let prepared: Vec<(String, Vec<Vec<f64>>)> = groups
        .iter()
        .map(|(s, ws)| Ok((s.clone(), ws.iter().map(|w| scorer.prepare(w)).collect::<Result<Vec<_>>>()?)))
        .collect::<Result<_>>()?;
    similarity_matrix(&prepared, |a, b| scorer.score_prepared(a, b))
}

/// `|mean(diagonal) − mean(off-diagonal)|`.
pub fn diag_dominance(m: &SimilarityMatrix) -> Result<f64> {
    let n = m.n();
    if n < 2 {
        return Err(MusaError::InsufficientData("diagonal dominance needs at least two speakers".into()));
    }
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diag += m.at(i, j);
            } else {
                off += m.at(i, j);
            }
        }
    }
    Ok((diag / n as f64 - off / (n * (n - 1)) as f64).abs())
}

/// Gain of voice distinctiveness in dB, `10 log10(D_aa / D_oo)`.
pub fn gvd(original: &SimilarityMatrix, anonymized: &SimilarityMatrix) -> Result<f64> {
    if original.speakers != anonymized.speakers {
        return Err(MusaError::InvalidInput("matrices cover different speakers".into()));
    }
    let d_oo = diag_dominance(original)?;
    if d_oo == 0.0 {
        return Err(MusaError::InvalidInput("original matrix has zero diagonal dominance".into()));
    }
    Ok(10.0 * (diag_dominance(anonymized)? / d_oo).log10())
}

/// Multinomial logistic regression on standardized features. Used as an
/// independent speaker-identification attacker.
#[derive(Debug, Clone)]
pub struct SpeakerProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    classes: usize,
    /// Row-major `[classes, dim + 1]`, bias last.
    weights: Vec<f64>,
}

impl SpeakerProbe {
    /// Full-batch gradient descent from zero weights, so the result depends
    /// only on the data.
    pub fn train(features: &[Vec<f64>], labels: &[usize], classes: usize, epochs: usize, lr: f64) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(MusaError::LengthMismatch {
                left: features.len(),
                right: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(MusaError::LabelOutOfRange {
                label: l,
                num_speakers: classes,
            });
        }
        let (mean, std) = standardization(features)?;
        let d = mean.len();
        let mut probe = Self {
            mean,
            std,
            classes,
            weights: vec![0.0; classes * (d + 1)],
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let n = xs.len() as f64;
        for _ in 0..epochs {
            let mut grad = vec![0.0; probe.weights.len()];
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.softmax(x);
                for c in 0..classes {
                    let e = (p[c] - f64::from(u8::from(c == y))) / n;
                    let row = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                    for (g, v) in row.iter_mut().zip(x.iter().chain(std::iter::once(&1.0))) {
                        *g += e * v;
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn softmax(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let logits: Vec<f64> = self
            .weights
            .chunks(d + 1)
            .map(|w| w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d])
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        if features.len() != self.mean.len() {
            return Err(MusaError::DimensionMismatch {
                expected: self.mean.len(),
                got: features.len(),
            });
        }
        let p = self.softmax(&self.standardize(features));
        Ok((0..self.classes).fold(0, |best, c| if p[c] > p[best] { c } else { best }))
    }

    /// Fraction of correctly identified rows.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(MusaError::InsufficientData("accuracy needs labelled rows".into()));
        }
        let mut hits = 0;
        for (f, &y) in features.iter().zip(labels) {
            hits += usize::from(self.predict(f)? == y);
        }
        Ok(hits as f64 / features.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(score: f64, is_target: bool) -> TrialScore {
        TrialScore {
            enroll_id: "e".into(),
            test_id: "t".into(),
            score,
            is_target,
        }
    }

    #[test]
    fn separable_scores_give_zero_eer() {
        let t = [trial(0.9, true), trial(0.8, true), trial(0.1, false), trial(0.2, false)];
        let r = compute_eer(&t).unwrap();
        assert_eq!(r.eer, 0.0);
        assert!(r.threshold > 0.2 && r.threshold <= 0.8);
    }

    #[test]
    fn identical_distributions_give_half() {
        let t = [trial(0.2, true), trial(0.8, true), trial(0.2, false), trial(0.8, false)];
        assert_eq!(compute_eer(&t).unwrap().eer, 0.5);
    }

    #[test]
    fn one_sided_trials_are_rejected() {
        assert!(matches!(compute_eer(&[trial(1.0, true)]), Err(MusaError::InsufficientData(_))));
        assert!(compute_eer(&[trial(f64::NAN, true), trial(0.0, false)]).is_err());
    }

    #[test]
    fn wer_counts_edit_kinds() {
        let r = tokenize("the cat sat on the mat", WerUnit::Word);
        let h = tokenize("the cat sit on mat today", WerUnit::Word);
        let w = compute_wer(&r, &h).unwrap();
        assert_eq!(w.substitutions + w.deletions + w.insertions, 3);
        assert_eq!(w.reference_len, 6);
        assert!((w.wer - 0.5).abs() < 1e-12);
        assert_eq!(compute_wer(&r, &r).unwrap().wer, 0.0);
        let empty: Vec<String> = Vec::new();
        assert_eq!(compute_wer(&r, &empty).unwrap().deletions, 6);
        assert!(compute_wer(&empty, &r).is_err());
    }

    #[test]
    fn character_unit_ignores_spaces() {
        assert_eq!(tokenize("ab c", WerUnit::Char), ["a", "b", "c"]);
        assert_eq!("char".parse::<WerUnit>().unwrap(), WerUnit::Char);
        assert!("byte".parse::<WerUnit>().is_err());
    }

    #[test]
    fn pitch_correlation_uses_joint_voicing() {
        let a = PitchTrack {
            f0_hz: vec![100.0, 110.0, 999.0, 130.0],
            voiced: vec![true, true, true, true],
            hop_secs: 0.01
        };
        let b = PitchTrack {
            f0_hz: vec![200.0, 220.0, 0.0, 260.0],
            voiced: vec![true, true, false, true],
            hop_secs: 0.01
        };
        assert!((pitch_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let flat = PitchTrack {
            f0_hz: vec![100.0; 4],
            voiced: vec![true; 4],
            hop_secs: 0.01
        };
        assert!(matches!(pitch_correlation(&a, &flat), Err(MusaError::InvalidInput(_))));
        let unvoiced = PitchTrack {
            f0_hz: vec![0.0; 4],
            voiced: vec![false; 4],
            hop_secs: 0.01
        };
        assert!(matches!(pitch_correlation(&a, &unvoiced), Err(MusaError::InsufficientData(_))));
    }

    #[test]
    fn similarity_excludes_self_pairs() {
        // Score is the product of ids; self pairs would add 1·1 and 2·2.
        let groups = vec![("a".to_string(), vec![1.0, 2.0]), ("b".to_string(), vec![-1.0, 3.0])];
        let m = similarity_matrix(&groups, |x: &f64, y: &f64| Ok(x * y)).unwrap();
        assert!((m.at(0, 0) - sigmoid(2.0)).abs() < 1e-15);
        assert!((m.at(1, 1) - sigmoid(-3.0)).abs() < 1e-15);
        assert!((m.at(0, 1) - sigmoid(1.5)).abs() < 1e-15);
        assert!(matches!(
            similarity_matrix(&[("b".to_string(), vec![1.0])], |x: &f64, y: &f64| Ok(x * y)),
            Err(MusaError::InsufficientData(_))
        ));
    }

    #[test]
    fn dominance_and_gvd() {
        let m = |v: Vec<f64>| SimilarityMatrix {
            speakers: vec!["a".into(), "b".into()],
            values: v,
        };
        let oo = m(vec![0.9, 0.1, 0.1, 0.9]);
        let aa = m(vec![0.5, 0.42, 0.42, 0.5]);
        assert!((diag_dominance(&oo).unwrap() - 0.8).abs() < 1e-12);
        assert!((gvd(&oo, &aa).unwrap() - 10.0 * (0.08f64 / 0.8).log10()).abs() < 1e-9);
        assert!((gvd(&oo, &oo).unwrap()).abs() < 1e-12);
        let flat = m(vec![0.5; 4]);
        assert!(matches!(gvd(&flat, &oo), Err(MusaError::InvalidInput(_))));
        let single = SimilarityMatrix {
            speakers: vec!["a".into()],
            values: vec![1.0],
        };
        assert!(diag_dominance(&single).is_err());
    }

    #[test]
    fn csv_and_tsv_round_trip() {
        let m = SimilarityMatrix {
            speakers: vec!["a".into(), "b".into()],
            values: vec![0.125, 0.5, 0.25, 1.0],
        };
        assert_eq!(SimilarityMatrix::from_csv(&m.to_csv(), Path::new("m.csv")).unwrap(), m);
        let t = vec![trial(1.5, true), trial(-0.25, false)];
        assert_eq!(parse_trials(&trials_to_tsv(&t), Path::new("t.tsv")).unwrap(), t);
        assert!(parse_trials("a\tb\t1\tmaybe\n", Path::new("t.tsv")).is_err());
    }

    #[test]
    fn probe_learns_a_separable_problem() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64 * 2.0 - 1.0 + 0.01 * i as f64, 0.3]).collect();
        let ys: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let p = SpeakerProbe::train(&xs, &ys, 2, 200, 0.5).unwrap();
        assert_eq!(p.accuracy(&xs, &ys).unwrap(), 1.0);
    }
}
