//! Training state on disk: configuration, step counter, label table, both
//! parameter stores, the quantizer bank with its EMA statistics and both
//! optimizers, in the shared checksummed container.

use std::path::Path;

use musa_autograd::{AdamW, ParamStore, Tensor};
use serde_json::json;

use crate::config::MusaConfig;
use crate::container;
use crate::encoders::LabelTable;
use crate::error::{MusaError, Result};
use crate::io::write_atomic;
use crate::model::MusaModel;

pub const MAGIC: &[u8; 8] = b"MUSACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: MusaConfig,
    /// Optimizer steps completed.
    pub step: u64,
    pub labels: LabelTable,
    pub model: MusaModel,
    pub g_opt: AdamW,
    pub d_opt: AdamW,
}

fn new_opt(store: &ParamStore, cfg: &MusaConfig) -> AdamW {
    let t = &cfg.training;
    AdamW::new(store, t.initial_lr, t.beta1, t.beta2, t.weight_decay)
}

fn push_store(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn push_opt(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore, opt: &AdamW) {
    // Hyper-parameters travel as f64 payload rather than JSON text so they
    // come back bit for bit.
    let hyper = vec![opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay];
    out.push((format!("{prefix}/hyper"), Tensor::new(vec![5], hyper)));
    for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
        out.push((format!("{prefix}/m/{name}"), m.clone()));
        out.push((format!("{prefix}/v/{name}"), v.clone()));
    }
}

fn read_store(c: &container::Container, prefix: &str, store: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (name, slot) in names.iter().zip(store.values_mut()) {
        let t = c.tensor(&format!("{prefix}/{name}"))?;
        if t.shape() != slot.shape() {
            return Err(MusaError::CorruptCheckpoint(format!(
                "{prefix}/{name} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

fn read_opt(c: &container::Container, prefix: &str, store: &ParamStore, step: u64) -> Result<AdamW> {
    let h = c.tensor(&format!("{prefix}/hyper"))?.data();
    if h.len() != 5 {
        return Err(MusaError::CorruptCheckpoint(format!("{prefix}/hyper has {} values", h.len())));
    }
    let mut opt = AdamW::new(store, h[0], h[1], h[2], h[4]);
    opt.eps = h[3];
    opt.step = step;
    for (i, (name, _)) in store.iter().enumerate() {
        opt.m[i] = c.tensor(&format!("{prefix}/m/{name}"))?.clone();
        opt.v[i] = c.tensor(&format!("{prefix}/v/{name}"))?.clone();
    }
    Ok(opt)
}

impl Checkpoint {
    /// Fresh state at step 0.
    pub fn initial(config: MusaConfig, labels: LabelTable) -> Result<Self> {
        config.validate()?;
        let model = MusaModel::new(&config.model, labels.len(), config.training.seed)?;
        let g_opt = new_opt(&model.generator, &config);
        let d_opt = new_opt(&model.discriminator, &config);
        Ok(Self {
            config,
            step: 0,
            labels,
            model,
            g_opt,
            d_opt,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let bank = &self.model.bank;
        let meta = json!({
            "config": self.config.to_toml_string(),
            "config_hash": self.config.hash(),
            "step": self.step,
            "labels": self.labels.to_tsv(),
            "label_hash": self.labels.hash(),
            "bank_initialized": bank.layers.iter().map(|l| l.initialized).collect::<Vec<_>>(),
            "g_opt_step": self.g_opt.step,
            "d_opt_step": self.d_opt.step,
        });
        let mut tensors = Vec::new();
        push_store(&mut tensors, "g", &self.model.generator);
        push_store(&mut tensors, "d", &self.model.discriminator);
        for (i, cb) in bank.layers.iter().enumerate() {
            let (k, d) = (cb.size, cb.dim);
            tensors.push((format!("bank/{i}/embeddings"), Tensor::new(vec![k, d], cb.embeddings.clone())));
            tensors.push((format!("bank/{i}/counts"), Tensor::new(vec![k], cb.counts.clone())));
            tensors.push((format!("bank/{i}/sums"), Tensor::new(vec![k, d], cb.sums.clone())));
            let unused = cb.unused_steps.iter().map(|&u| u as f64).collect();
            tensors.push((format!("bank/{i}/unused"), Tensor::new(vec![k], unused)));
        }
        push_opt(&mut tensors, "g_opt", &self.model.generator, &self.g_opt);
        push_opt(&mut tensors, "d_opt", &self.model.discriminator, &self.d_opt);
        container::encode(MAGIC, VERSION, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(MAGIC, VERSION, bytes)?;
        let field = |k: &str| c.meta.get(k).ok_or_else(|| MusaError::CorruptCheckpoint(format!("missing {k}")));
        let text = |k: &str| -> Result<String> {
            field(k)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| MusaError::CorruptCheckpoint(format!("{k} is not a string")))
        };
        let uint = |k: &str| -> Result<u64> {
            field(k)?
                .as_u64()
                .ok_or_else(|| MusaError::CorruptCheckpoint(format!("{k} is not an integer")))
        };
        let config = MusaConfig::from_toml_str(&text("config")?)?;
        let labels = LabelTable::from_names(text("labels")?.lines().filter_map(|l| l.split_once('\t')).map(|(_, n)| n.to_string()));
        if labels.hash() != text("label_hash")? {
            return Err(MusaError::CorruptCheckpoint("label table does not match its hash".into()));
        }
        let mut model = MusaModel::new(&config.model, labels.len(), 0)?;
        read_store(&c, "g", &mut model.generator)?;
        read_store(&c, "d", &mut model.discriminator)?;
        let flags: Vec<bool> = serde_json::from_value(field("bank_initialized")?.clone())?;
        if flags.len() != model.bank.layers.len() {
            return Err(MusaError::CorruptCheckpoint("bank layer count differs from config".into()));
        }
        for (i, (cb, init)) in model.bank.layers.iter_mut().zip(flags).enumerate() {
            let get = |name: &str, len: usize| -> Result<Vec<f64>> {
                let t = c.tensor(&format!("bank/{i}/{name}"))?;
                if t.numel() != len {
                    return Err(MusaError::CorruptCheckpoint(format!("bank/{i}/{name} has {} values", t.numel())));
                }
                Ok(t.data().to_vec())
            };
            cb.embeddings = get("embeddings", cb.size * cb.dim)?;
            cb.counts = get("counts", cb.size)?;
            cb.sums = get("sums", cb.size * cb.dim)?;
            cb.unused_steps = get("unused", cb.size)?.into_iter().map(|u| u as u32).collect();
            cb.initialized = init;
        }
        let g_opt = read_opt(&c, "g_opt", &model.generator, uint("g_opt_step")?)?;
        let d_opt = read_opt(&c, "d_opt", &model.discriminator, uint("d_opt_step")?)?;
        Ok(Self {
            config,
            step: uint("step")?,
            labels,
            model,
            g_opt,
            d_opt,
        })
    }

    /// Writes through a temporary sibling and a rename, so an interrupted
    /// save never leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| MusaError::io(path, e))?)
    }

    /// Hex digest of the serialized checkpoint.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MusaConfig {
        let mut c = MusaConfig::toy();
        c.model.latent_dim = 8;
        c.model.codebook_size = 16;
        c.model.num_quantizers = 2;
        c.teacher.tokenizer_codebook_size = 8;
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let mut ck = Checkpoint::initial(tiny(), LabelTable::from_names(["a", "b"])).unwrap();
        ck.step = 7;
        ck.g_opt.step = 7;
        ck.model.bank.layers[0].embeddings[3] = 0.25;
        ck.model.bank.layers[1].unused_steps[2] = 9;
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model.generator, ck.model.generator);
        assert_eq!(back.model.bank, ck.model.bank);
        assert_eq!(back.g_opt, ck.g_opt);
        assert_eq!(back.step, 7);
    }

    #[test]
    fn version_and_checksum_guards() {
        let ck = Checkpoint::initial(tiny(), LabelTable::from_names(["a"])).unwrap();
        let mut bytes = ck.to_bytes();
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(MusaError::VersionMismatch { found, .. }) if found == VERSION + 1));
        let mut bytes = ck.to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(MusaError::CorruptCheckpoint(_))));
    }
}
