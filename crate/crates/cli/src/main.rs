//! `musa`: train the codec, anonymize corpora and score privacy and utility.

mod plot;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use musa_core::anonymizer::anonymize_corpus;
use musa_core::checkpoint::Checkpoint;
use musa_core::config::MusaConfig;
use musa_core::data::{write_toy_corpus, Dataset, Manifest};
use musa_core::dsp::{extract_pitch, load_waveform, Waveform};
use musa_core::io::{read_to_string, sha256_file, write_atomic};
use musa_core::metrics::{
    compute_eer, compute_wer, diag_dominance, gvd, parse_trial_keys, parse_trials, pitch_correlation,
    similarity_from_audio, CosineScorer, ModelEmbedder, ScoreProvider, SimilarityMatrix, CenteredSpectrumScorer,
    WerUnit,
};
use musa_core::scenario::{run_scenario, Scenario, ScenarioInputs};
use musa_core::teacher::{train_tokenizer, TokenizerTrainConfig};
use musa_core::trainer::{teacher_features, train, TOTAL_LOG};
use musa_core::{MusaError, Result};

pub const RUN_FILE: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "musa", version, about = "Speaker anonymization by serial disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML configuration file; overrides --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile: desk or toy.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// `section.key=value` override in TOML syntax; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<MusaConfig> {
        let mut c = match &self.config {
            Some(p) => MusaConfig::load(p)?,
            None => MusaConfig::profile(&self.profile)?,
        };
        for o in &self.overrides {
            c.set_override(o)?;
        }
        c.apply_env()?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ScorerKind {
    /// Centered long-term log-mel spectrum, with the mean taken over the original audio.
    Mel,
    /// The codec's speaker encoder (needs --scorer-ckpt).
    Model,
}

#[derive(Args, Debug, Clone)]
struct ScorerArgs {
    #[arg(long, value_enum, default_value = "mel")]
    scorer: ScorerKind,
    #[arg(long)]
    scorer_ckpt: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic two-speaker corpus and its manifest.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the codec from a manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total optimizer steps (overrides training.total_steps).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Fit the teacher tokenizer on a corpus.
    TokenizerTrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Output tokenizer file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Anonymize every utterance of a manifest.
    Anonymize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Permit alpha > 0 regardless of the checkpoint's configuration.
        #[arg(long)]
        allow_partial_alpha: bool,
    },
    /// Privacy and utility metrics.
    Eval {
        #[command(subcommand)]
        metric: EvalCommand,
    },
    /// Score a trial list under an attack scenario.
    RunScenario {
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        /// `enroll<TAB>test<TAB>target|nontarget` lines.
        #[arg(long)]
        trials: PathBuf,
        /// Audio manifest covering every trial utterance.
        #[arg(long)]
        manifest: PathBuf,
        /// System under attack; omit to score unanonymized test audio.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// The attacker's own system, required for lazy-informed.
        #[arg(long)]
        attacker_ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the quantizer codes of every utterance as `<utt_id>.codes`.
    ExportCodes {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render figures as PNG.
    Plot {
        #[command(subcommand)]
        figure: PlotCommand,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Equal error rate of scored trials.
    Eer {
        /// `enroll<TAB>test<TAB>score<TAB>target|nontarget` lines.
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word (or character) error rate between `utt_id<TAB>text` files.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "word", value_parser = parse_unit)]
        unit: WerUnit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pitch correlation between original and anonymized utterances.
    Pitch {
        #[arg(long)]
        original: PathBuf,
        /// Directory holding `<utt_id>.wav` per manifest entry.
        #[arg(long)]
        anonymized: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gain of voice distinctiveness from two similarity matrices.
    Gvd {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        anonymized: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum PlotCommand {
    /// Heatmap of a similarity matrix CSV.
    GvdMatrix {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speaker embeddings projected on their two principal axes.
    Embeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: MusaError| e.to_string())
}

fn parse_unit(s: &str) -> std::result::Result<WerUnit, String> {
    s.parse().map_err(|e: MusaError| e.to_string())
}

/// Provenance written next to every output.
#[derive(Default)]
struct RunInfo {
    config_hash: Option<String>,
    checkpoint_hash: Option<String>,
    seed: Option<u64>,
}

impl RunInfo {
    fn from_config(c: &MusaConfig) -> Self {
        Self {
            config_hash: Some(c.hash()),
            checkpoint_hash: None,
            seed: Some(c.training.seed),
        }
    }

    fn with_checkpoint(mut self, path: &Path, ck: &Checkpoint) -> Result<Self> {
        self.checkpoint_hash = Some(sha256_file(path)?);
        self.config_hash.get_or_insert_with(|| ck.config.hash());
        self.seed.get_or_insert(ck.config.training.seed);
        Ok(self)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| MusaError::Io {
            path: dir.into(),
            source: e,
        })?;
        let seed = self.seed.or_else(|| std::env::var("MUSA_SEED").ok().and_then(|s| s.trim().parse().ok()));
        let record = json!({
            "command": std::env::args().collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "seed": seed,
        });
        write_atomic(&dir.join(RUN_FILE), &serde_json::to_vec_pretty(&record)?)
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MusaError::Io {
        path: dir.into(),
        source: e,
    })?;
    write_atomic(&dir.join(name), &serde_json::to_vec_pretty(value)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    log::info!("loading {}", path.display());
    Checkpoint::load(path)
}

/// `utt_id<TAB>text` lines.
fn load_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line.split_once('\t').ok_or_else(|| MusaError::Parse {
            path: path.into(),
            line: i + 1,
            msg: "expected utt_id<TAB>text".into(),
        })?;
        out.push((id.to_string(), t.to_string()));
    }
    Ok(out)
}

/// Original and anonymized audio grouped by speaker, in manifest order.
type Groups = Vec<(String, Vec<Waveform>)>;

fn paired_groups(original: &Manifest, anonymized_dir: &Path) -> Result<(Groups, Groups)> {
    let mut order: Vec<String> = Vec::new();
    let mut oo: HashMap<String, Vec<Waveform>> = HashMap::new();
    let mut aa: HashMap<String, Vec<Waveform>> = HashMap::new();
    for e in &original.entries {
        if !oo.contains_key(&e.speaker) {
            order.push(e.speaker.clone());
        }
        oo.entry(e.speaker.clone()).or_default().push(load_waveform(&e.wav_path)?);
        let anon = anonymized_dir.join(format!("{}.wav", e.utt_id));
        aa.entry(e.speaker.clone()).or_default().push(load_waveform(&anon)?);
    }
    let take = |m: &mut HashMap<String, Vec<Waveform>>| order.iter().map(|s| (s.clone(), m.remove(s).unwrap_or_default())).collect();
    Ok((take(&mut oo), take(&mut aa)))
}

/// The scorer plus any checkpoint it was built from.
fn build_scorer(args: &ScorerArgs, reference: &[Waveform], info: &mut RunInfo) -> Result<Box<dyn ScoreProvider>> {
    Ok(match args.scorer {
        ScorerKind::Mel => Box::new(CenteredSpectrumScorer::fit(reference, &MusaConfig::desk().scoring)?),
        ScorerKind::Model => {
            let path = args
                .scorer_ckpt
                .as_ref()
                .ok_or_else(|| MusaError::Config("--scorer model needs --scorer-ckpt".into()))?;
            let ck = load_checkpoint(path)?;
            info.checkpoint_hash.get_or_insert(sha256_file(path)?);
            Box::new(CosineScorer::new(ModelEmbedder(ck.model), &ck.config.scoring))
        }
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ToyCorpus { out } => {
            let m = write_toy_corpus(&out)?;
            println!("wrote {} utterances to {}", m.len(), out.display());
            RunInfo::default().write(&out)
        }
        Command::Train {
            config,
            manifest,
            out,
            resume,
            steps,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(s) = steps {
                cfg.training.total_steps = s;
            }
            let info = RunInfo::from_config(&cfg);
            let m = Manifest::load(&manifest)?;
            std::fs::create_dir_all(&out).map_err(|e| MusaError::Io {
                path: out.clone(),
                source: e,
            })?;
            let (trainer, files) = train(cfg, &m, &out, resume.as_deref(), |records| {
                if let Some(r) = records.iter().find(|r| r.term == TOTAL_LOG) {
                    log::info!("step {} total {:.4}", r.step + 1, r.value);
                }
            })?;
            println!("trained to step {}; checkpoint {}", trainer.state.step, files.checkpoint.display());
            info.with_checkpoint(&files.checkpoint, &trainer.state)?.write(&out)
        }
        Command::TokenizerTrain { config, manifest, out } => {
            let cfg = config.resolve()?;
            let data = Dataset::load(&Manifest::load(&manifest)?)?;
            let feats = teacher_features(&cfg, &data)?;
            let dim = feats.first().map(|f| f.dim).ok_or_else(|| MusaError::InsufficientData("empty manifest".into()))?;
            let tok = train_tokenizer(&feats, &TokenizerTrainConfig::from_config(&cfg, dim))?;
            tok.save(&out)?;
            println!("tokenizer with {} classes written to {}", tok.classes(), out.display());
            RunInfo::from_config(&cfg).write(&parent_dir(&out))
        }
        Command::Anonymize {
            ckpt,
            manifest,
            alpha,
            out,
            allow_partial_alpha,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let mut acfg = ck.config.anonymizer.clone();
            acfg.allow_partial_alpha |= allow_partial_alpha;
            let report = anonymize_corpus(&ck.model, &Manifest::load(&manifest)?, alpha, &out, &acfg)?;
            let failed = report.iter().filter(|r| !r.succeeded()).count();
            println!("anonymized {} of {} utterances into {}", report.len() - failed, report.len(), out.display());
            for r in report.iter().filter(|r| !r.succeeded()) {
                log::warn!("{}: {}", r.utt_id, r.error.as_deref().unwrap_or("failed"));
            }
            RunInfo::default().with_checkpoint(&ckpt, &ck)?.write(&out)
        }
        Command::Eval { metric } => eval(metric),
        Command::RunScenario {
            scenario,
            trials,
            manifest,
            ckpt,
            attacker_ckpt,
            alpha,
            scorer,
            out,
        } => {
            let keys = parse_trial_keys(&read_to_string(&trials)?, &trials)?;
            let audio = Manifest::load(&manifest)?;
            let mut info = RunInfo::default();
            let system = ckpt.as_deref().map(load_checkpoint).transpose()?;
            if let (Some(p), Some(ck)) = (&ckpt, &system) {
                info = info.with_checkpoint(p, ck)?;
            }
            let attacker = attacker_ckpt.as_deref().map(load_checkpoint).transpose()?;
            let reference: Vec<Waveform> = audio.entries.iter().map(|e| load_waveform(&e.wav_path)).collect::<Result<_>>()?;
            let scorer = build_scorer(&scorer, &reference, &mut info)?;
            let inputs = ScenarioInputs {
                scenario,
                trials: &keys,
                audio: &audio,
                system: system.as_ref().map(|c| &c.model),
                attacker: attacker.as_ref().map(|c| &c.model),
                alpha,
            };
            let r = run_scenario(&inputs, scorer.as_ref(), Some(&out))?;
            println!("{} EER {:.4} at threshold {:.4} over {} trials", scenario.name(), r.eer, r.threshold, r.scores.len());
            info.write(&out)
        }
        Command::ExportCodes { ckpt, manifest, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let m = Manifest::load(&manifest)?;
            std::fs::create_dir_all(&out).map_err(|e| MusaError::Io {
                path: out.clone(),
                source: e,
            })?;
            for e in &m.entries {
                let a = ck.model.analyze(&load_waveform(&e.wav_path)?)?;
                a.codes.save(&out.join(format!("{}.codes", e.utt_id)))?;
            }
            println!("wrote codes for {} utterances to {}", m.len(), out.display());
            RunInfo::default().with_checkpoint(&ckpt, &ck)?.write(&out)
        }
        Command::Plot { figure } => match figure {
            PlotCommand::GvdMatrix { matrix, out } => {
                let m = SimilarityMatrix::from_csv(&read_to_string(&matrix)?, &matrix)?;
                plot::heatmap(&m).save(&out).map_err(|e| MusaError::InvalidInput(format!("{}: {e}", out.display())))?;
                RunInfo::default().write(&parent_dir(&out))
            }
            PlotCommand::Embeddings { ckpt, manifest, out } => {
                let ck = load_checkpoint(&ckpt)?;
                let m = Manifest::load(&manifest)?;
                let mut points = Vec::new();
                for e in &m.entries {
                    let s = ck.model.embed_speaker(&load_waveform(&e.wav_path)?)?;
                    points.push((e.speaker.clone(), s.values().to_vec()));
                }
                plot::scatter(&points)?.save(&out).map_err(|e| MusaError::InvalidInput(format!("{}: {e}", out.display())))?;
                RunInfo::default().with_checkpoint(&ckpt, &ck)?.write(&parent_dir(&out))
            }
        },
    }
}

fn eval(metric: EvalCommand) -> Result<()> {
    match metric {
        EvalCommand::Eer { trials, out } => {
            let t = parse_trials(&read_to_string(&trials)?, &trials)?;
            let r = compute_eer(&t)?;
            println!("EER {:.4} at threshold {:.4}", r.eer, r.threshold);
            write_json(&out, "results.json", &json!({"eer": r.eer, "threshold": r.threshold, "trials": t.len()}))?;
            RunInfo::default().write(&out)
        }
        EvalCommand::Wer { reference, hyp, unit, out } => {
            let refs = load_transcripts(&reference)?;
            let hyps: HashMap<String, String> = load_transcripts(&hyp)?.into_iter().collect();
            let (mut errors, mut n) = (0, 0);
            let mut per_utt = Vec::new();
            for (id, text) in &refs {
                let h = hyps
                    .get(id)
                    .ok_or_else(|| MusaError::InvalidInput(format!("no hypothesis for {id}")))?;
                let w = compute_wer(&musa_core::metrics::tokenize(text, unit), &musa_core::metrics::tokenize(h, unit))?;
                errors += w.substitutions + w.deletions + w.insertions;
                n += w.reference_len;
                per_utt.push(json!({"utt_id": id, "wer": w.wer, "S": w.substitutions, "D": w.deletions, "I": w.insertions, "N": w.reference_len}));
            }
            if n == 0 {
                return Err(MusaError::InsufficientData("no reference transcripts".into()));
            }
            let wer = errors as f64 / n as f64;
            println!("WER {wer:.4} over {n} reference tokens");
            write_json(&out, "results.json", &json!({"wer": wer, "errors": errors, "reference_tokens": n, "utterances": per_utt}))?;
            RunInfo::default().write(&out)
        }
        EvalCommand::Pitch { original, anonymized, out } => {
            let m = Manifest::load(&original)?;
            let mut per_utt = Vec::new();
            let mut values = Vec::new();
            for e in &m.entries {
                let a = extract_pitch(&load_waveform(&e.wav_path)?)?;
                let b = extract_pitch(&load_waveform(&anonymized.join(format!("{}.wav", e.utt_id)))?)?;
                // Anonymized audio is trimmed to whole frames; compare the common prefix.
                let n = a.len().min(b.len());
                let cut = |p: &musa_core::dsp::PitchTrack| musa_core::dsp::PitchTrack {
                    f0_hz: p.f0_hz[..n].to_vec(),
                    voiced: p.voiced[..n].to_vec(),
                    hop_secs: p.hop_secs,
                };
                match pitch_correlation(&cut(&a), &cut(&b)) {
                    Ok(r) => {
                        values.push(r);
                        per_utt.push(json!({"utt_id": e.utt_id, "rho": r}));
                    }
                    Err(err) => per_utt.push(json!({"utt_id": e.utt_id, "error": err.to_string()})),
                }
            }
            if values.is_empty() {
                return Err(MusaError::InsufficientData("no utterance had enough jointly voiced frames".into()));
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            println!("mean pitch correlation {mean:.4} over {} utterances", values.len());
            write_json(&out, "results.json", &json!({"mean_rho": mean, "utterances": per_utt}))?;
            RunInfo::default().write(&out)
        }
        EvalCommand::Gvd {
            original,
            anonymized,
            scorer,
            out,
        } => {
            let (oo, aa) = paired_groups(&Manifest::load(&original)?, &anonymized)?;
            let mut info = RunInfo::default();
            let reference: Vec<Waveform> = oo.iter().flat_map(|g| g.1.iter().cloned()).collect();
            let s = build_scorer(&scorer, &reference, &mut info)?;
            let m_oo = similarity_from_audio(&oo, s.as_ref())?;
            let m_aa = similarity_from_audio(&aa, s.as_ref())?;
            let g = gvd(&m_oo, &m_aa)?;
            std::fs::create_dir_all(&out).map_err(|e| MusaError::Io {
                path: out.clone(),
                source: e,
            })?;
            write_atomic(&out.join("similarity_oo.csv"), m_oo.to_csv().as_bytes())?;
            write_atomic(&out.join("similarity_aa.csv"), m_aa.to_csv().as_bytes())?;
            println!("GVD {g:.3} dB");
            write_json(
                &out,
                "results.json",
                &json!({"gvd_db": g, "d_oo": diag_dominance(&m_oo)?, "d_aa": diag_dominance(&m_aa)?}),
            )?;
            info.write(&out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
