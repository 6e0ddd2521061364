use crate::error::{RammError, Result};
use crate::kv::KvMap;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub itc_temperature: f64,
    /// EMA decay of the momentum model used for soft ITC targets.
    pub momentum: f64,
    /// Weight of the momentum soft targets against one-hot ITC targets.
    pub distill_weight: f64,
    /// Decay of the fine-tuning weight average.
    pub ema_decay: f64,
    pub rdrop_alpha: f64,
    pub mask_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            itc_temperature: 0.07,
            momentum: 0.995,
            distill_weight: 0.4,
            ema_decay: 0.999,
            rdrop_alpha: 0.6,
            mask_rate: 0.15,
            batch_size: 16,
            epochs: 10,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(RammError::Config(format!("{name}={v} must lie strictly between 0 and 1")))
            }
        };
        open_unit("momentum", self.momentum)?;
        open_unit("ema_decay", self.ema_decay)?;
        open_unit("mask_rate", self.mask_rate)?;
        if !(self.itc_temperature > 0.0) {
            return Err(RammError::Config("itc_temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.distill_weight) {
            return Err(RammError::Config("distill_weight must be in [0, 1]".into()));
        }
        if self.rdrop_alpha < 0.0 || self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(RammError::Config("rdrop_alpha, lr and weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(RammError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("train.itc_temperature", self.itc_temperature);
        kv.set("train.momentum", self.momentum);
        kv.set("train.distill_weight", self.distill_weight);
        kv.set("train.ema_decay", self.ema_decay);
        kv.set("train.rdrop_alpha", self.rdrop_alpha);
        kv.set("train.mask_rate", self.mask_rate);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.epochs", self.epochs);
        kv.set("train.lr", self.lr);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.seed", self.seed);
        kv
    }

    pub fn update_from_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read("train.itc_temperature", &mut self.itc_temperature)?;
        kv.read("train.momentum", &mut self.momentum)?;
        kv.read("train.distill_weight", &mut self.distill_weight)?;
        kv.read("train.ema_decay", &mut self.ema_decay)?;
        kv.read("train.rdrop_alpha", &mut self.rdrop_alpha)?;
        kv.read("train.mask_rate", &mut self.mask_rate)?;
        kv.read("train.batch_size", &mut self.batch_size)?;
        kv.read("train.epochs", &mut self.epochs)?;
        kv.read("train.lr", &mut self.lr)?;
        kv.read("train.weight_decay", &mut self.weight_decay)?;
        kv.read("train.seed", &mut self.seed)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let mut back = TrainConfig {
            seed: 99,
            ..TrainConfig::default()
        };
        back.update_from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        for bad in [
            TrainConfig { momentum: 1.0, ..c.clone() },
            TrainConfig { mask_rate: 0.0, ..c.clone() },
            TrainConfig { itc_temperature: 0.0, ..c.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(RammError::Config(_))));
        }
    }
}
