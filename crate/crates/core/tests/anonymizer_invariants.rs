//! Concealment and decoding invariants of the anonymizer.

mod common;

use common::{tiny_model, toy_dataset, toy_manifest};
use musa_core::anonymizer::{anonymize, anonymize_corpus, anonymize_with_codes, conceal, ReportEntry, REPORT_FILE};
use musa_core::config::AnonymizerConfig;
use musa_core::data::Manifest;
use musa_core::encoders::SpeakerEmbedding;
use musa_core::MusaError;

#[test]
fn zero_alpha_conceals_to_the_zero_vector() {
    let s = SpeakerEmbedding::new(vec![0.3, -1.5, 2.0, 7.0]);
    let z = conceal(&s, 0.0).unwrap();
    assert_eq!(z.dim(), 4);
    assert!(z.values().iter().all(|&v| v == 0.0));
}

#[test]
fn fixed_codes_decode_identically_for_any_speaker_at_zero_alpha() {
    let (model, _) = tiny_model(21);
    let data = toy_dataset();
    let a = model.analyze(&data.utterances[0].wave).unwrap();
    let reference = anonymize_with_codes(&model, &a.codes, &a.s, 0.0).unwrap();
    for u in &data.utterances[1..] {
        let s = model.embed_speaker(&u.wave).unwrap();
        assert_ne!(s, a.s);
        let y = anonymize_with_codes(&model, &a.codes, &s, 0.0).unwrap();
        assert_eq!(y.samples(), reference.samples(), "speaker of {} leaked into the output", u.id);
    }
    // A non-zero blend does depend on the speaker.
    let other = model.embed_speaker(&data.utterances[7].wave).unwrap();
    let blended = anonymize_with_codes(&model, &a.codes, &other, 1.0).unwrap();
    assert_ne!(blended.samples(), reference.samples());
}

#[test]
fn full_alpha_is_plain_reconstruction() {
    let (model, _) = tiny_model(22);
    for u in &toy_dataset().utterances[..3] {
        let y = anonymize(&model, &u.wave, 1.0).unwrap();
        let r = model.reconstruct(&u.wave).unwrap();
        assert_eq!(y.samples(), r.samples());
        assert_eq!(y.len(), u.wave.len() / model.hop() * model.hop());
    }
}

#[test]
fn corpus_run_writes_one_file_per_utterance_and_a_report() {
    let (model, _) = tiny_model(23);
    let manifest = Manifest::load(&toy_manifest()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = anonymize_corpus(&model, &manifest, 0.0, dir.path(), &AnonymizerConfig::default()).unwrap();
    assert_eq!(report.len(), manifest.len());
    for (r, e) in report.iter().zip(&manifest.entries) {
        assert_eq!(r.utt_id, e.utt_id);
        assert!(r.succeeded(), "{:?}", r.error);
        assert!(dir.path().join(format!("{}.wav", e.utt_id)).is_file());
    }
    let text = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    let back: Vec<ReportEntry> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}

#[test]
fn partial_alpha_needs_opt_in() {
    let (model, _) = tiny_model(24);
    let manifest = Manifest::load(&toy_manifest()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = anonymize_corpus(&model, &manifest, 0.5, dir.path(), &AnonymizerConfig::default()).unwrap_err();
    assert!(matches!(err, MusaError::Config(_)));
    assert!(!dir.path().join(REPORT_FILE).exists());
}
