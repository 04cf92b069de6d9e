//! Alternating discriminator/generator optimization of the full objective.
//!
//! One step: sample the seeded batch, build the generator tape, update the
//! discriminators on the detached reconstruction, score the generator with the
//! updated discriminators, update the generator, then fold the batch into the
//! codebooks by EMA.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use musa_autograd::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{MusaConfig, TeacherSource};
use crate::data::{sample_batch, BatchShape, Dataset, Manifest};
use crate::dsp::SAMPLE_RATE;
use crate::error::{MusaError, Result};
use crate::io::write_atomic;
use crate::model::weighted_total;
use crate::teacher::{
    PrecomputedTeacher, SyntheticTeacher, TeacherFeatureSequence, TeacherProvider, Tokenizer, TokenizerTrainConfig,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.musa";
pub const TOKENIZER_FILE: &str = "tokenizer.tok";
pub const LOSS_FILE: &str = "losses.csv";
pub const SPEAKERS_FILE: &str = "speakers.tsv";
pub const CONFIG_FILE: &str = "config.toml";

/// Logged names besides the six generator terms.
pub const MEL_LOG: &str = "mel";
pub const TOTAL_LOG: &str = "total";
pub const DISC_LOG: &str = "disc";

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

pub fn losses_to_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,term,value\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.step, r.term, r.value);
    }
    out
}

/// Values of `term` in step order.
pub fn term_series(records: &[LossRecord], term: &str) -> Vec<f64> {
    records.iter().filter(|r| r.term == term).map(|r| r.value).collect()
}

pub fn teacher_provider(config: &MusaConfig) -> Result<Box<dyn TeacherProvider>> {
    Ok(match config.teacher.source {
        TeacherSource::Synthetic => Box::new(SyntheticTeacher),
        TeacherSource::Precomputed => {
            let dir = config
                .teacher
                .features_dir
                .as_ref()
                .ok_or_else(|| MusaError::Config("precomputed teacher needs teacher.features_dir".into()))?;
            Box::new(PrecomputedTeacher::open(dir)?)
        }
    })
}

pub fn teacher_features(config: &MusaConfig, data: &Dataset) -> Result<Vec<TeacherFeatureSequence>> {
    let provider = teacher_provider(config)?;
    data.utterances.iter().map(|u| provider.features(&u.id, &u.wave)).collect()
}

/// Attaches teacher tokens to every utterance, loading the configured
/// tokenizer or training one on the corpus.
pub fn attach_tokens(config: &MusaConfig, data: &mut Dataset) -> Result<Tokenizer> {
    let features = teacher_features(config, data)?;
    let tokenizer = match &config.teacher.tokenizer_checkpoint {
        Some(p) => Tokenizer::load(p)?,
        None => {
            let cfg = TokenizerTrainConfig::from_config(config, features[0].dim);
            crate::teacher::train_tokenizer(&features, &cfg)?
        }
    };
    if tokenizer.classes() > config.model.codebook_size {
        return Err(MusaError::Config(format!(
            "tokenizer has {} classes, more than the {} layer-1 codes",
            tokenizer.classes(),
            config.model.codebook_size
        )));
    }
    for (u, f) in data.utterances.iter_mut().zip(&features) {
        u.tokens = Some(tokenizer.tokenize(f)?);
    }
    Ok(tokenizer)
}

pub struct Trainer {
    pub state: Checkpoint,
    pub data: Dataset,
    pub shape: BatchShape,
    pub log: Vec<LossRecord>,
}

impl Trainer {
    /// Starts from freshly initialized parameters. `data` must carry tokens.
    pub fn new(config: MusaConfig, data: Dataset) -> Result<Self> {
        let state = Checkpoint::initial(config, data.labels.clone())?;
        Self::resume(state, data)
    }

    /// Continues from a checkpoint trained on the same speaker set.
    pub fn resume(state: Checkpoint, data: Dataset) -> Result<Self> {
        if state.labels != data.labels {
            return Err(MusaError::InvalidInput("checkpoint speaker table differs from the manifest's".into()));
        }
        let c = &state.config;
        let shape = BatchShape::new(
            c.training.batch_size,
            c.data.crop_secs,
            c.data.segment_min_secs,
            c.data.segment_max_secs,
            c.model.hop(),
        );
        Ok(Self {
            state,
            data,
            shape,
            log: Vec::new(),
        })
    }

    /// Epoch index of optimizer step `step` for the learning-rate schedule.
    pub fn epoch_of(&self, step: u64) -> u64 {
        let spe = self.state.config.data.steps_per_epoch;
        if spe > 0 {
            step / spe
        } else {
            step * self.shape.batch_size as u64 / self.data.len() as u64
        }
    }

    /// Runs one optimizer step and returns the values it logged.
    pub fn step(&mut self) -> Result<Vec<LossRecord>> {
        let step = self.state.step;
        let cfg = self.state.config.clone();
        let weights = &cfg.training;
        let batch = sample_batch(&self.data, &self.shape, step, weights.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(weights.seed);
        rng.set_stream(1 << 62 | step);

        let lr = weights.lr_at_epoch(self.epoch_of(step));
        self.state.g_opt.lr = lr;
        self.state.d_opt.lr = lr;
        let model = &mut self.state.model;
        if !model.bank.is_initialized() {
            let rows = model.latent_rows(&batch)?;
            model.bank.init_kmeans(&rows, &mut rng);
        }

        let mut records = Vec::new();
        let mut record = |term: &str, value: f64| -> Result<()> {
            if !value.is_finite() {
                return Err(MusaError::NonFiniteLoss { term: term.into(), step });
            }
            records.push(LossRecord {
                step,
                term: term.into(),
                value,
            });
            Ok(())
        };

        let g = Graph::new();
        let p = model.generator.bind(&g, true);
        let pass = model.generator_pass(&g, &p, &batch, weights, None)?;

        // Discriminator update on the detached reconstruction.
        {
            let gd = Graph::new();
            let dp = model.discriminator.bind(&gd, true);
            let ld = model.discriminator_objective(&gd, &dp, &pass.x.value(), &pass.x_hat.value());
            record(DISC_LOG, ld.item())?;
            let grads = gd.backward(ld);
            let gs = model.discriminator.collect_grads(&dp, &grads);
            self.state.d_opt.update(&mut model.discriminator, &gs);
        }

        let dp = model.discriminator.bind(&g, false);
        let mut terms = pass.terms;
        terms.extend(model.adversarial_terms(&dp, pass.x, pass.x_hat, weights));
        terms.sort_by_key(|(t, _)| *t);
        for (t, v) in &terms {
            record(t.name(), v.item())?;
        }
        record(MEL_LOG, pass.mel)?;
        let total = weighted_total(&terms, weights)?;
        record(TOTAL_LOG, total.item())?;
        let grads = g.backward(total);
        let gs = model.generator.collect_grads(&p, &grads);
        self.state.g_opt.update(&mut model.generator, &gs);
        model.bank.ema_update(&pass.quant.rvq, &mut rng);

        self.state.step += 1;
        self.log.extend(records.iter().cloned());
        Ok(records)
    }

    /// Steps until `total_steps` have been completed.
    pub fn run(&mut self, mut progress: impl FnMut(&[LossRecord])) -> Result<()> {
        while self.state.step < self.state.config.training.total_steps {
            let r = self.step()?;
            if self.state.config.data.log_every > 0 && (self.state.step % self.state.config.data.log_every == 0) {
                progress(&r);
            }
        }
        Ok(())
    }
}

/// Files a training run leaves in its output directory.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub losses: PathBuf,
    pub speakers: PathBuf,
    pub config: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join(CHECKPOINT_FILE),
            tokenizer: dir.join(TOKENIZER_FILE),
            losses: dir.join(LOSS_FILE),
            speakers: dir.join(SPEAKERS_FILE),
            config: dir.join(CONFIG_FILE),
        }
    }
}

/// End-to-end training from a manifest, optionally resuming a checkpoint.
/// Writes the checkpoint, tokenizer, loss log, label table and config into
/// `out_dir`.
pub fn train(
    config: MusaConfig,
    manifest: &Manifest,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: impl FnMut(&[LossRecord]),
) -> Result<(Trainer, TrainOutputs)> {
    let mut data = Dataset::load(manifest)?;
    let min_len = data.utterances.iter().map(|u| u.wave.len()).min().unwrap_or(0);
    log::info!(
        "{} utterances, {} speakers, shortest {:.2} s",
        data.len(),
        data.labels.len(),
        min_len as f64 / SAMPLE_RATE as f64
    );
    let tokenizer = attach_tokens(&config, &mut data)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut state = Checkpoint::load(p)?;
            state.config.training.total_steps = config.training.total_steps;
            Trainer::resume(state, data)?
        }
        None => Trainer::new(config, data)?,
    };
    trainer.run(progress)?;
    let out = TrainOutputs::in_dir(out_dir);
    trainer.state.save(&out.checkpoint)?;
    tokenizer.save(&out.tokenizer)?;
    write_atomic(&out.losses, losses_to_csv(&trainer.log).as_bytes())?;
    trainer.state.labels.save(&out.speakers)?;
    write_atomic(&out.config, trainer.state.config.to_toml_string().as_bytes())?;
    Ok((trainer, out))
}
