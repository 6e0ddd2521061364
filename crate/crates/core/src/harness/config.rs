use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::synth::SyntheticSpec;
use crate::error::{RammError, Result};
use crate::kv::KvMap;
use crate::model::{EncoderGrads, ModelConfig};
use crate::objectives::TrainConfig;

pub fn parse_encoder_grads(s: &str) -> Result<EncoderGrads> {
    match s.to_ascii_lowercase().as_str() {
        "none" => Ok(EncoderGrads::None),
        "original" => Ok(EncoderGrads::Original),
        "all" => Ok(EncoderGrads::All),
        _ => Err(RammError::Config(format!("unknown encoder_grads `{s}` (none|original|all)"))),
    }
}

pub fn encoder_grads_name(g: EncoderGrads) -> &'static str {
    match g {
        EncoderGrads::None => "none",
        EncoderGrads::Original => "original",
        EncoderGrads::All => "all",
    }
}

/// Fine-tuning settings. Weight decay, the R-Drop weight and the EMA decay
/// are shared with [`TrainConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Retrieved pairs per sample; 0 disables retrieval.
    pub r: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rdrop: bool,
    /// Evaluate the weight average instead of the last iterate.
    pub ema: bool,
    pub encoder_grads: EncoderGrads,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            r: 4,
            epochs: 40,
            batch_size: 16,
            lr: 2e-3,
            rdrop: true,
            ema: true,
            encoder_grads: EncoderGrads::All,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, max_retrieved: usize) -> Result<()> {
        if self.r > max_retrieved {
            return Err(RammError::InvalidR(self.r));
        }
        if self.batch_size == 0 || self.lr < 0.0 {
            return Err(RammError::Config("finetune: batch_size must be positive and lr non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("finetune.r", self.r);
        kv.set("finetune.epochs", self.epochs);
        kv.set("finetune.batch_size", self.batch_size);
        kv.set("finetune.lr", self.lr);
        kv.set("finetune.rdrop", self.rdrop);
        kv.set("finetune.ema", self.ema);
        kv.set("finetune.encoder_grads", encoder_grads_name(self.encoder_grads));
        kv.set("finetune.seed", self.seed);
        kv
    }

    pub fn update_from_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read("finetune.r", &mut self.r)?;
        kv.read("finetune.epochs", &mut self.epochs)?;
        kv.read("finetune.batch_size", &mut self.batch_size)?;
        kv.read("finetune.lr", &mut self.lr)?;
        kv.read("finetune.rdrop", &mut self.rdrop)?;
        kv.read("finetune.ema", &mut self.ema)?;
        kv.read("finetune.seed", &mut self.seed)?;
        if let Some(v) = kv.get_str("finetune.encoder_grads") {
            self.encoder_grads = parse_encoder_grads(v)?;
        }
        Ok(())
    }
}

/// Everything one desk-scale experiment needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SyntheticSpec,
    /// Vocabulary size, image geometry and answer count are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SyntheticSpec::default(),
            model: ModelConfig {
                d: 32,
                n_head: 2,
                d_ff: 64,
                l_text: 1,
                l_image: 1,
                l_fuse: 1,
                d_proj: 16,
                max_text_len: 8,
                dropout_rate: 0.1,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.synth.to_kv();
        kv.merge(&self.model.to_kv());
        kv.merge(&self.train.to_kv());
        kv.merge(&self.finetune.to_kv());
        kv
    }

    /// Apply known keys; unknown keys are a configuration error so typos
    /// do not pass silently.
    pub fn update_from_kv(&mut self, kv: &KvMap) -> Result<()> {
        let known = self.to_kv();
        if let Some(k) = kv.0.keys().find(|k| !known.0.contains_key(*k) && *k != "synth.fingerprint") {
            return Err(RammError::Config(format!("unknown key `{k}`")));
        }
        self.synth.update_from_kv(kv)?;
        self.model.update_from_kv(kv)?;
        self.train.update_from_kv(kv)?;
        self.finetune.update_from_kv(kv)
    }

    /// Defaults, then the file (if any), then `key=value` overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.to_path_buf()),
                _ => e.into(),
            })?;
            cfg.update_from_kv(&KvMap::parse(&text)?)?;
        }
        cfg.update_from_kv(&KvMap::parse(&overrides.join("\n"))?)?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    /// Short hash of the full configuration, for report headers.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_kv().render().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}
