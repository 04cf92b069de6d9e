//! Attack scenarios over a verification trial list.
//!
//! In the ignorant scenario the attacker enrolls with original speech and
//! is tested on anonymized speech. In the lazy-informed scenario the attacker
//! also anonymizes the enrollment audio, using a system of their own (a
//! second checkpoint). Test utterances go through the system under attack;
//! without one they stay unanonymized.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anonymizer::anonymize;
use crate::data::Manifest;
use crate::dsp::{load_waveform, Waveform};
use crate::error::{MusaError, Result};
use crate::io::write_atomic;
use crate::metrics::{compute_eer, trials_to_tsv, ScoreProvider, TrialKey, TrialScore};
use crate::model::MusaModel;

pub const RESULTS_FILE: &str = "results.json";
pub const SCORES_FILE: &str = "scores.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Ignorant,
    LazyInformed,
}

impl std::str::FromStr for Scenario {
    type Err = MusaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ignorant" => Ok(Self::Ignorant),
            "lazy-informed" => Ok(Self::LazyInformed),
            other => Err(MusaError::InvalidInput(format!(
                "scenario must be ignorant or lazy-informed, got {other:?}"
            ))),
        }
    }
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ignorant => "ignorant",
            Self::LazyInformed => "lazy-informed",
        }
    }
}

pub struct ScenarioInputs<'a> {
    pub scenario: Scenario,
    pub trials: &'a [TrialKey],
    /// Audio for every utterance id the trials mention.
    pub audio: &'a Manifest,
    /// System under attack; `None` scores the test side unanonymized.
    pub system: Option<&'a MusaModel>,
    /// The attacker's own system, required for lazy-informed.
    pub attacker: Option<&'a MusaModel>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub eer: f64,
    pub threshold: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
    #[serde(skip)]
    pub scores: Vec<TrialScore>,
}

fn prepared_side(
    ids: impl Iterator<Item = String>,
    paths: &HashMap<&str, &Path>,
    model: Option<&MusaModel>,
    alpha: f64,
    scorer: &dyn ScoreProvider,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for id in ids {
        if out.contains_key(&id) {
            continue;
        }
        let path = paths
            .get(id.as_str())
            .ok_or_else(|| MusaError::InvalidInput(format!("utterance {id} is not in the audio manifest")))?;
        let w: Waveform = load_waveform(path)?;
        let w = match model {
            Some(m) => anonymize(m, &w, alpha)?,
            None => w,
        };
        out.insert(id, scorer.prepare(&w)?);
    }
    Ok(out)
}

/// Scores every trial and computes the EER. With `out_dir`, writes
/// `results.json` and the scored trials as `scores.tsv`.
pub fn run_scenario(inputs: &ScenarioInputs, scorer: &dyn ScoreProvider, out_dir: Option<&Path>) -> Result<ScenarioResult> {
    if inputs.trials.is_empty() {
        return Err(MusaError::InsufficientData("trial list is empty".into()));
    }
    let enroll_model = match inputs.scenario {
        Scenario::Ignorant => None,
        Scenario::LazyInformed => Some(inputs.attacker.ok_or_else(|| {
            MusaError::Config("the lazy-informed scenario needs a second checkpoint for the attacker".into())
        })?),
    };
    let paths: HashMap<&str, &Path> = inputs
        .audio
        .entries
        .iter()
        .map(|e| (e.utt_id.as_str(), e.wav_path.as_path()))
        .collect();
    let enroll = prepared_side(
        inputs.trials.iter().map(|t| t.enroll_id.clone()),
        &paths,
        enroll_model,
        inputs.alpha,
        scorer,
    )?;
    let test = prepared_side(
        inputs.trials.iter().map(|t| t.test_id.clone()),
        &paths,
        inputs.system,
        inputs.alpha,
        scorer,
    )?;
    let scores = inputs
        .trials
        .iter()
        .map(|t| {
            Ok(TrialScore {
                enroll_id: t.enroll_id.clone(),
                test_id: t.test_id.clone(),
                score: scorer.score_prepared(&enroll[&t.enroll_id], &test[&t.test_id])?,
                is_target: t.is_target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let eer = compute_eer(&scores)?;
    let num_target = scores.iter().filter(|s| s.is_target).count();
    let result = ScenarioResult {
        scenario: inputs.scenario,
        eer: eer.eer,
        threshold: eer.threshold,
        num_target,
        num_nontarget: scores.len() - num_target,
        scores,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| MusaError::io(dir, e))?;
        write_atomic(&dir.join(RESULTS_FILE), &serde_json::to_vec_pretty(&result)?)?;
        write_atomic(&dir.join(SCORES_FILE), trials_to_tsv(&result.scores).as_bytes())?;
    }
    Ok(result)
}

/// Every cross-utterance pair of the manifest, target when the speakers
/// match.
pub fn all_pairs_trials(manifest: &Manifest) -> Vec<TrialKey> {
    let mut out = Vec::new();
    for (i, a) in manifest.entries.iter().enumerate() {
        for b in &manifest.entries[i + 1..] {
            out.push(TrialKey {
                enroll_id: a.utt_id.clone(),
                test_id: b.utt_id.clone(),
                is_target: a.speaker == b.speaker,
            });
        }
    }
    out
}

pub fn trial_keys_to_tsv(trials: &[TrialKey]) -> String {
    trials
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.enroll_id, t.test_id, if t.is_target { "target" } else { "nontarget" }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::parse_trial_keys;

    #[test]
    fn scenario_names_parse() {
        assert_eq!("lazy-informed".parse::<Scenario>().unwrap(), Scenario::LazyInformed);
        assert_eq!(Scenario::Ignorant.name(), "ignorant");
        assert!("informed".parse::<Scenario>().is_err());
    }

    #[test]
    fn pairs_round_trip_through_tsv() {
        let m = Manifest::parse("a1\ta\tx.wav\na2\ta\ty.wav\nb1\tb\tz.wav\n", Path::new("m.tsv")).unwrap();
        let t = all_pairs_trials(&m);
        assert_eq!(t.len(), 3);
        assert_eq!(t.iter().filter(|k| k.is_target).count(), 1);
        assert_eq!(parse_trial_keys(&trial_keys_to_tsv(&t), Path::new("t")).unwrap(), t);
    }
}
