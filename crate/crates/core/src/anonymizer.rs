//! Anonymization by concealing the speaker embedding.
//!
//! The codec analyses an utterance as usual, then decodes the quantized
//! content and prosody with `alpha · s` in place of the speaker embedding
//! `s`. At `alpha = 0` the decoder sees an all-zero embedding, so the output
//! depends on the input only through its codes. No speaker pool or
//! pseudo-speaker search is involved.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::AnonymizerConfig;
use crate::data::Manifest;
use crate::dsp::{load_waveform, save_waveform, Waveform};
use crate::encoders::SpeakerEmbedding;
use crate::error::{MusaError, Result};
use crate::io::write_atomic;
use crate::model::MusaModel;
use crate::rvq::CodeSequence;

pub const REPORT_FILE: &str = "report.json";

/// `alpha · s + (1 − alpha) · s̄` with `s̄ = 0`. At `alpha = 0` the result is
/// the empty embedding.
pub fn conceal(s: &SpeakerEmbedding, alpha: f64) -> Result<SpeakerEmbedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MusaError::AlphaOutOfRange(alpha));
    }
    if alpha == 0.0 {
        return Ok(SpeakerEmbedding::empty(s.dim()));
    }
    Ok(SpeakerEmbedding::new(s.values().iter().map(|v| alpha * v).collect()))
}

/// Rejects `alpha > 0` unless partial blends are enabled. A blend keeps part
/// of each utterance's own embedding, so utterances of one speaker no longer
/// share a single pseudo-speaker.
pub fn check_alpha(alpha: f64, cfg: &AnonymizerConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MusaError::AlphaOutOfRange(alpha));
    }
    if alpha > 0.0 && !cfg.allow_partial_alpha {
        return Err(MusaError::Config(format!(
            "alpha {alpha} > 0 keeps per-utterance speaker information; set anonymizer.allow_partial_alpha = true to allow it"
        )));
    }
    Ok(())
}

/// Output is `floor(len / hop) · hop` samples long.
pub fn anonymize(model: &MusaModel, w: &Waveform, alpha: f64) -> Result<Waveform> {
    let a = model.analyze(w)?;
    model.decode(&a.quantized.total, &conceal(&a.s, alpha)?)
}

/// Decodes fixed codes with a concealed embedding.
pub fn anonymize_with_codes(model: &MusaModel, codes: &CodeSequence, s: &SpeakerEmbedding, alpha: f64) -> Result<Waveform> {
    let q = model.bank.decode_codes(codes, model.hop())?;
    model.decode(&q, &conceal(s, alpha)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub utt_id: String,
    /// `ok` or `failed`.
    pub status: String,
    pub out_path: Option<PathBuf>,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl ReportEntry {
    pub fn succeeded(&self) -> bool {
        self.status == "ok"
    }
}

/// Anonymizes every manifest entry into `out_dir/<utt_id>.wav`, in parallel.
/// A failing entry is recorded in the report and does not stop the others.
/// The report (`report.json`) lists entries in manifest order.
pub fn anonymize_corpus(
    model: &MusaModel,
    manifest: &Manifest,
    alpha: f64,
    out_dir: &Path,
    cfg: &AnonymizerConfig,
) -> Result<Vec<ReportEntry>> {
    check_alpha(alpha, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| MusaError::io(out_dir, e))?;
    let report: Vec<ReportEntry> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let out = out_dir.join(format!("{}.wav", e.utt_id));
            let result = load_waveform(&e.wav_path)
                .and_then(|w| anonymize(model, &w, alpha))
                .and_then(|y| save_waveform(&out, &y));
            match result {
                Ok(()) => ReportEntry {
                    utt_id: e.utt_id.clone(),
                    status: "ok".into(),
                    out_path: Some(out),
                    alpha,
                    error: None,
                },
                Err(err) => ReportEntry {
                    utt_id: e.utt_id.clone(),
                    status: "failed".into(),
                    out_path: None,
                    alpha,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    write_atomic(&out_dir.join(REPORT_FILE), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conceal_blends_toward_zero() {
        let s = SpeakerEmbedding::new(vec![2.0, -4.0, 0.0]);
        let z = conceal(&s, 0.0).unwrap();
        assert!(z.is_empty() && z.values().iter().all(|&v| v == 0.0));
        assert_eq!(conceal(&s, 1.0).unwrap(), s);
        assert_eq!(conceal(&s, 0.5).unwrap().values(), &[1.0, -2.0, 0.0]);
        assert!(matches!(conceal(&s, 1.5), Err(MusaError::AlphaOutOfRange(_))));
        assert!(matches!(conceal(&s, -0.1), Err(MusaError::AlphaOutOfRange(_))));
    }

    #[test]
    fn partial_alpha_is_gated() {
        let mut cfg = AnonymizerConfig::default();
        assert!(check_alpha(0.0, &cfg).is_ok());
        assert!(matches!(check_alpha(0.3, &cfg), Err(MusaError::Config(_))));
        cfg.allow_partial_alpha = true;
        assert!(check_alpha(0.3, &cfg).is_ok());
    }
}
