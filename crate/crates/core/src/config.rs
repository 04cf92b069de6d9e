//! Unified TOML configuration. `[training]` mirrors the optimizer and loss
//! settings one-to-one; the other sections hold model sizes, data sampling,
//! teacher selection and the anonymizer gate.
//!
//! Two profiles ship: [`MusaConfig::desk`] (default sizes, batch 4, 2000 steps,
//! 1 s crops) and [`MusaConfig::toy`] (narrow channels, shorter crops), which is
//! what the tests and the committed corpus use.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MusaError, Result};
use crate::io::{read_to_string, sha256_hex};

pub const SEED_ENV: &str = "MUSA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_r: 45.0,
            lambda_a: 1.0,
            lambda_f: 1.0,
            lambda_c: 0.1,
            lambda_s: 1.0,
            lambda_m: 1.0,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 0.01,
            initial_lr: 2e-4,
            lr_decay: 0.999,
            total_steps: 2000,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_r", self.lambda_r),
            ("lambda_a", self.lambda_a),
            ("lambda_f", self.lambda_f),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("lambda_m", self.lambda_m),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MusaError::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(MusaError::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.initial_lr > 0.0) {
            return Err(MusaError::Config("initial_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MusaError::Config("beta1 and beta2 must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(MusaError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate after `epoch` completed manifest passes.
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.initial_lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent width d shared by the speech encoder, speaker encoder and codebooks.
    pub latent_dim: usize,
    /// Channels after the input convolution; doubled by every downsampling block.
    pub encoder_channels: usize,
    pub strides: Vec<usize>,
    pub lstm_layers: usize,
    pub speaker_channels: Vec<usize>,
    /// Frequency stride of each speaker-encoder conv block.
    pub speaker_freq_stride: usize,
    pub num_quantizers: usize,
    pub codebook_size: usize,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub dead_code_steps: u32,
    pub disc_channels: usize,
    pub mpd_periods: Vec<usize>,
    pub msd_scales: usize,
    pub stft_ffts: Vec<usize>,
}

impl ModelConfig {
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn top_channels(&self) -> usize {
        self.encoder_channels << self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MusaError::Config(m.to_string()));
        if self.latent_dim == 0 || self.encoder_channels == 0 || self.strides.is_empty() {
            return bad("latent_dim, encoder_channels and strides must be non-empty");
        }
        if self.strides.iter().any(|&s| s == 0) {
            return bad("strides must be positive");
        }
        if self.num_quantizers == 0 || self.codebook_size < 2 || self.codebook_size > u16::MAX as usize + 1 {
            return bad("need at least one quantizer and 2..=65536 codes");
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_epsilon < 0.0 {
            return bad("ema_decay must be in [0, 1) and ema_epsilon >= 0");
        }
        if self.speaker_channels.is_empty() || self.speaker_freq_stride == 0 {
            return bad("speaker encoder needs at least one conv block and a positive stride");
        }
        if self.mpd_periods.iter().any(|&p| p == 0) || self.stft_ffts.iter().any(|&n| n < 4) {
            return bad("discriminator periods and FFT sizes must be positive");
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 512,
            encoder_channels: 32,
            strides: vec![2, 4, 5, 8],
            lstm_layers: 2,
            speaker_channels: vec![32, 32],
            speaker_freq_stride: 2,
            num_quantizers: 8,
            codebook_size: 1024,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            dead_code_steps: 200,
            disc_channels: 16,
            mpd_periods: vec![2, 3, 5, 7, 11],
            msd_scales: 3,
            stft_ffts: vec![512, 1024, 2048],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Length of the training crop fed through the codec, in seconds.
    pub crop_secs: f64,
    pub segment_min_secs: f64,
    pub segment_max_secs: f64,
    /// Optimizer steps per learning-rate epoch; 0 means one manifest pass.
    pub steps_per_epoch: u64,
    pub log_every: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            crop_secs: 1.0,
            segment_min_secs: 0.6,
            segment_max_secs: 1.2,
            steps_per_epoch: 0,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSource {
    Synthetic,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub source: TeacherSource,
    pub features_dir: Option<PathBuf>,
    pub tokenizer_checkpoint: Option<PathBuf>,
    pub tokenizer_codebook_size: usize,
    pub tokenizer_dim: usize,
    pub tokenizer_epochs: usize,
    pub tokenizer_batch: usize,
    pub tokenizer_lr: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            source: TeacherSource::Synthetic,
            features_dir: None,
            tokenizer_checkpoint: None,
            tokenizer_codebook_size: 1024,
            tokenizer_dim: 20,
            tokenizer_epochs: 30,
            tokenizer_batch: 256,
            tokenizer_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnonymizerConfig {
    /// Blended concealment (alpha > 0) keeps part of each utterance's own
    /// embedding, so same-speaker consistency across utterances is no longer
    /// guaranteed. It must be switched on explicitly.
    pub allow_partial_alpha: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    /// LLR-like score is `scale * cosine + offset`.
    pub llr_scale: f64,
    pub llr_offset: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            llr_scale: 10.0,
            llr_offset: -5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MusaConfig {
    pub profile: String,
    pub training: TrainingConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub anonymizer: AnonymizerConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
}

impl MusaConfig {
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            training: TrainingConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            anonymizer: AnonymizerConfig::default(),
            scoring: ScoringConfig::default(),
        }
    }

    /// Sized for a single CPU core and the committed 10-utterance corpus.
    pub fn toy() -> Self {
        let mut c = Self::desk();
        c.profile = "toy".into();
        c.training.batch_size = 2;
        c.model.encoder_channels = 4;
        c.model.speaker_channels = vec![8, 8];
        c.model.disc_channels = 4;
        c.data.crop_secs = 0.5;
        // The corpus has 1000 teacher frames, fewer than 1024 codes.
        c.teacher.tokenizer_codebook_size = 64;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(MusaError::Config(format!("unknown profile {other:?} (expected desk or toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.model.validate()?;
        let d = &self.data;
        if !(d.crop_secs > 0.0 && d.segment_min_secs > 0.0 && d.segment_min_secs <= d.segment_max_secs) {
            return Err(MusaError::Config("crop and segment lengths must be positive with min <= max".into()));
        }
        if self.teacher.source == TeacherSource::Precomputed && self.teacher.features_dir.is_none() {
            return Err(MusaError::Config("precomputed teacher needs teacher.features_dir".into()));
        }
        if self.teacher.tokenizer_codebook_size == 0 || self.teacher.tokenizer_codebook_size > self.model.codebook_size {
            return Err(MusaError::Config(
                "tokenizer_codebook_size must be in 1..=codebook_size so tokens index layer-1 codes".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| MusaError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Applies `MUSA_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.training.seed = v
                .trim()
                .parse()
                .map_err(|_| MusaError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Applies a `section.key=value` override, with the value in TOML syntax.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| MusaError::Config(format!("override {spec:?} is not key=value")))?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml_string()).expect("round-trip of own output");
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut doc;
        for p in path {
            table = table
                .get_mut(*p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| MusaError::Config(format!("unknown config section {p:?}")))?;
        }
        if !table.contains_key(*last) && *last != "features_dir" && *last != "tokenizer_checkpoint" {
            return Err(MusaError::Config(format!("unknown config key {key:?}")));
        }
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
            .map(|mut t| t.remove("v").expect("just inserted"))
            .or_else(|_| Ok::<_, MusaError>(toml::Value::String(value.trim().to_string())))?;
        table.insert(last.to_string(), parsed);
        *self = Self::from_toml_str(&toml::to_string(&doc).expect("table serializes"))?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }
}
