use crate::error::{RammError, Result};
use crate::kv::KvMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Hidden width shared by every encoder.
    pub d: usize,
    pub n_head: usize,
    pub d_ff: usize,
    pub l_text: usize,
    pub l_image: usize,
    pub l_fuse: usize,
    /// Width of the contrastive projection space.
    pub d_proj: usize,
    pub max_text_len: usize,
    /// Images are `patch_grid × patch_grid` patches of `d_patch` features.
    pub patch_grid: usize,
    pub d_patch: usize,
    pub n_answers: usize,
    pub max_retrieved: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 128,
            d: 64,
            n_head: 4,
            d_ff: 128,
            l_text: 2,
            l_image: 2,
            l_fuse: 2,
            d_proj: 32,
            max_text_len: 32,
            patch_grid: 4,
            d_patch: 16,
            n_answers: 8,
            max_retrieved: 8,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by the gradient checks.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d: 8,
            n_head: 2,
            d_ff: 12,
            l_text: 1,
            l_image: 1,
            l_fuse: 1,
            d_proj: 4,
            max_text_len: 8,
            patch_grid: 2,
            d_patch: 3,
            n_answers: 3,
            max_retrieved: 4,
            dropout_rate: 0.0,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("n_head", self.n_head),
            ("d_ff", self.d_ff),
            ("l_fuse", self.l_fuse),
            ("d_proj", self.d_proj),
            ("max_text_len", self.max_text_len),
            ("patch_grid", self.patch_grid),
            ("d_patch", self.d_patch),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(RammError::Config(format!("{name} must be at least 1")));
        }
        if !self.d.is_multiple_of(self.n_head) {
            return Err(RammError::Config(format!(
                "d={} is not divisible by n_head={}",
                self.d, self.n_head
            )));
        }
        if self.n_answers < 2 {
            return Err(RammError::Config("answer vocabulary needs at least 2 classes".into()));
        }
        if self.vocab_size < 4 {
            return Err(RammError::Config("vocabulary must hold the 4 special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(RammError::Config("dropout_rate must be in [0, 1)".into()));
        }
        if self.d_proj > u16::MAX as usize {
            return Err(RammError::Config("d_proj must fit in 16 bits".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("model.vocab_size", self.vocab_size);
        kv.set("model.d", self.d);
        kv.set("model.n_head", self.n_head);
        kv.set("model.d_ff", self.d_ff);
        kv.set("model.l_text", self.l_text);
        kv.set("model.l_image", self.l_image);
        kv.set("model.l_fuse", self.l_fuse);
        kv.set("model.d_proj", self.d_proj);
        kv.set("model.max_text_len", self.max_text_len);
        kv.set("model.patch_grid", self.patch_grid);
        kv.set("model.d_patch", self.d_patch);
        kv.set("model.n_answers", self.n_answers);
        kv.set("model.max_retrieved", self.max_retrieved);
        kv.set("model.dropout_rate", self.dropout_rate);
        kv
    }

    /// Apply any `model.*` keys present in `kv` on top of `self`.
    pub fn update_from_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read("model.vocab_size", &mut self.vocab_size)?;
        kv.read("model.d", &mut self.d)?;
        kv.read("model.n_head", &mut self.n_head)?;
        kv.read("model.d_ff", &mut self.d_ff)?;
        kv.read("model.l_text", &mut self.l_text)?;
        kv.read("model.l_image", &mut self.l_image)?;
        kv.read("model.l_fuse", &mut self.l_fuse)?;
        kv.read("model.d_proj", &mut self.d_proj)?;
        kv.read("model.max_text_len", &mut self.max_text_len)?;
        kv.read("model.patch_grid", &mut self.patch_grid)?;
        kv.read("model.d_patch", &mut self.d_patch)?;
        kv.read("model.n_answers", &mut self.n_answers)?;
        kv.read("model.max_retrieved", &mut self.max_retrieved)?;
        kv.read("model.dropout_rate", &mut self.dropout_rate)?;
        Ok(())
    }
}
