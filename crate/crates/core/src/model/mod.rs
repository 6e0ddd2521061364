//! The retrieval-augmented dual-stream model: uni-modal encoders, ITC
//! projection heads, the fusion stack and the task heads.

pub mod config;
pub mod encoders;
pub mod fusion;
pub mod heads;
pub mod layers;
pub mod params;
pub mod vocab;

use std::fs;
use std::path::Path;

pub use config::ModelConfig;
pub use encoders::{ImageEncoder, PatchGrid, ProjectionHead, TextEncoder};
pub use fusion::{fuse, fuse_backward, FuseOutput, FusionLayer, FusionState};
pub use heads::{ItmHead, MlmHead, VqaHead};
pub use layers::{Ctx, Init};
pub use params::Params;
pub use vocab::{TokenSequence, Vocab};

use encoders::{ImageCache, TextCache};
use fusion::FuseCache;
use params::impl_params;

use crate::error::{RammError, Result};
use crate::kv::KvMap;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RammModel<T> {
    pub text: TextEncoder<T>,
    pub image: ImageEncoder<T>,
    pub text_proj: ProjectionHead<T>,
    pub image_proj: ProjectionHead<T>,
    pub fusion: Vec<FusionLayer<T>>,
    pub vqa: VqaHead<T>,
    pub itm: ItmHead<T>,
    pub mlm: MlmHead<T>,
}
impl_params!(RammModel { text, image, text_proj, image_proj, fusion, vqa, itm, mlm });

/// One image-text pair ready for the encoders.
#[derive(Clone, Copy, Debug)]
pub struct PairInput<'a, T> {
    pub text: &'a TokenSequence,
    pub image: &'a PatchGrid<T>,
}

/// Uni-modal hidden states of one pair plus what backward needs.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub text: Tensor<T>,
    pub image: Tensor<T>,
    text_cache: TextCache<T>,
    image_cache: ImageCache<T>,
}

#[derive(Clone, Debug)]
pub struct FusedCache<T> {
    streams: Vec<Encoded<T>>,
    fuse: FuseCache<T>,
}

#[derive(Clone, Debug)]
pub struct VqaForward<T> {
    pub logits: Tensor<T>,
    fused: FusedCache<T>,
    head: heads::VqaCache<T>,
}

/// Which encoder passes receive gradients during backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderGrads {
    /// Encoders are treated as frozen.
    None,
    /// Only the original sample's encodings.
    Original,
    /// The original and every retrieved pair.
    All,
}

impl<T: Real> RammModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut init = Init::new(seed);
        Ok(RammModel {
            text: TextEncoder::new(&mut init, c.vocab_size, c.max_text_len, c.d, c.n_head, c.d_ff, c.l_text),
            image: ImageEncoder::new(&mut init, c.n_patches(), c.d_patch, c.d, c.n_head, c.d_ff, c.l_image),
            text_proj: ProjectionHead::new(&mut init, c.d, c.d_proj),
            image_proj: ProjectionHead::new(&mut init, c.d, c.d_proj),
            fusion: (0..c.l_fuse).map(|_| FusionLayer::new(&mut init, c.d, c.n_head, c.d_ff)).collect(),
            vqa: VqaHead::new(&mut init, c.d, c.n_answers),
            itm: ItmHead::new(&mut init, c.d),
            mlm: MlmHead::new(&mut init, c.d, c.vocab_size),
        })
    }

    pub fn encode(&self, pair: PairInput<'_, T>, ctx: &Ctx, stream: usize) -> Result<Encoded<T>> {
        let (text, text_cache) = self.text.forward(pair.text, ctx, stream)?;
        let (image, image_cache) = self.image.forward(pair.image, ctx, stream)?;
        Ok(Encoded {
            text,
            image,
            text_cache,
            image_cache,
        })
    }

    pub fn encode_backward(&self, enc: &Encoded<T>, d_text: &Tensor<T>, d_image: &Tensor<T>, grads: &mut Self) -> Result<()> {
        self.text.backward(&enc.text_cache, d_text, &mut grads.text)?;
        self.image.backward(&enc.image_cache, d_image, &mut grads.image)
    }

    /// Text-encoder backward only, for gradients that reach just the caption.
    pub fn text_backward(&self, enc: &Encoded<T>, d_text: &Tensor<T>, grads: &mut Self) -> Result<()> {
        self.text.backward(&enc.text_cache, d_text, &mut grads.text)
    }

    /// Unit-norm ITC vector of a text CLS row.
    pub fn project_text(&self, w_cls: &[T]) -> Result<Tensor<T>> {
        Ok(self.text_proj.project(w_cls)?.0)
    }

    /// Unit-norm ITC vector of an image CLS row.
    pub fn project_image(&self, v_cls: &[T]) -> Result<Tensor<T>> {
        Ok(self.image_proj.project(v_cls)?.0)
    }

    /// Image-side query vector used for retrieval.
    pub fn image_query(&self, image: &PatchGrid<T>) -> Result<Tensor<T>> {
        let (v, _) = self.image.forward(image, &Ctx::inference(), 0)?;
        self.project_image(v.row(0))
    }

    /// Encode the original pair and every retrieved pair, then fuse.
    pub fn fuse_pairs(
        &self,
        original: PairInput<'_, T>,
        retrieved: &[PairInput<'_, T>],
        ctx: &Ctx,
    ) -> Result<(FuseOutput<T>, FusedCache<T>)> {
        let mut streams = Vec::with_capacity(retrieved.len() + 1);
        streams.push(self.encode(original, ctx, 0)?);
        for (j, p) in retrieved.iter().enumerate() {
            streams.push(self.encode(*p, ctx, j + 1)?);
        }
        let rest: Vec<(Tensor<T>, Tensor<T>)> = streams[1..]
            .iter()
            .map(|e| (e.text.clone(), e.image.clone()))
            .collect();
        let (out, fuse) = fusion::fuse(&self.fusion, &streams[0].text, &streams[0].image, &rest, ctx)?;
        Ok((out, FusedCache { streams, fuse }))
    }

    /// Backward from gradients on the fused stream-0 states.
    pub fn fuse_pairs_backward(
        &self,
        cache: &FusedCache<T>,
        d_text: &Tensor<T>,
        d_image: &Tensor<T>,
        grads: &mut Self,
        encoder_grads: EncoderGrads,
    ) -> Result<()> {
        let (dt, di) = fusion::fuse_backward(&self.fusion, &cache.fuse, d_text, d_image, &mut grads.fusion)?;
        let upto = match encoder_grads {
            EncoderGrads::None => 0,
            EncoderGrads::Original => 1,
            EncoderGrads::All => cache.streams.len(),
        };
        for j in 0..upto {
            self.encode_backward(&cache.streams[j], &dt[j], &di[j], grads)?;
        }
        Ok(())
    }

    /// Answer logits (`1 × n_answers`) for a question about an image.
    pub fn vqa_forward(
        &self,
        question: &TokenSequence,
        image: &PatchGrid<T>,
        retrieved: &[PairInput<'_, T>],
        ctx: &Ctx,
    ) -> Result<VqaForward<T>> {
        let (out, fused) = self.fuse_pairs(PairInput { text: question, image }, retrieved, ctx)?;
        let (logits, head) = self.vqa.forward(out.text.row(0), out.image.row(0), ctx)?;
        Ok(VqaForward { logits, fused, head })
    }

    pub fn vqa_backward(
        &self,
        fwd: &VqaForward<T>,
        d_logits: &Tensor<T>,
        grads: &mut Self,
        encoder_grads: EncoderGrads,
    ) -> Result<()> {
        let (dw, dv) = self.vqa.backward(&fwd.head, d_logits, &mut grads.vqa)?;
        let s = &fwd.fused.streams[0];
        let mut d_text = Tensor::zeros(s.text.shape());
        let mut d_image = Tensor::zeros(s.image.shape());
        d_text.row_mut(0).copy_from_slice(&dw);
        d_image.row_mut(0).copy_from_slice(&dv);
        self.fuse_pairs_backward(&fwd.fused, &d_text, &d_image, grads, encoder_grads)
    }
}

/// Model configuration stored in a checkpoint directory.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join("config.txt");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.clone()),
        _ => e.into(),
    })?;
    let mut config = ModelConfig::default();
    config.update_from_kv(&KvMap::parse(&text)?)?;
    config.validate()?;
    Ok(config)
}

/// Write `config.txt`, `vocab.txt` and the weight manifest into `dir`.
pub fn save_checkpoint(dir: &Path, model: &RammModel<f32>, config: &ModelConfig, vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), config.to_kv().render())?;
    vocab.save(&dir.join("vocab.txt"))?;
    params::save_params(model, dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<(RammModel<f32>, ModelConfig, Vocab)> {
    let config = checkpoint_config(dir)?;
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    if vocab.len() != config.vocab_size {
        return Err(RammError::Structure(format!(
            "vocabulary has {} tokens but config says {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mut model = RammModel::new(&config, 0)?;
    params::load_params(&mut model, dir)?;
    Ok((model, config, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{flatten, unflatten, zeros_like};
    use crate::tensor::ops::cross_entropy;
    use crate::tensor::{finite_difference_gradient, relative_error};

    fn micro() -> (ModelConfig, Vocab) {
        let vocab = Vocab::new(["ct", "mri", "lesion", "left", "right", "what"]);
        (ModelConfig::micro(vocab.len()), vocab)
    }

    fn grid(seed: u64, c: &ModelConfig) -> PatchGrid<f64> {
        PatchGrid::new(Init::new(seed).normal(&[c.n_patches(), c.d_patch], 1.0), c.patch_grid).unwrap()
    }

    #[test]
    fn full_model_gradient_check() {
        let (c, vocab) = micro();
        let model: RammModel<f64> = RammModel::new(&c, 3).unwrap();
        let q = vocab.tokenize("what ct lesion", c.max_text_len);
        let img = grid(1, &c);
        let caps = [vocab.tokenize("left lesion", 8), vocab.tokenize("mri right ct", 8)];
        let imgs = [grid(2, &c), grid(3, &c)];
        let ret: Vec<PairInput<f64>> = caps.iter().zip(&imgs).map(|(t, i)| PairInput { text: t, image: i }).collect();
        let loss = |m: &RammModel<f64>| -> Result<f64> {
            let f = m.vqa_forward(&q, &img, &ret, &Ctx::inference())?;
            Ok(cross_entropy(&f.logits, &[1])?.0)
        };
        let fwd = model.vqa_forward(&q, &img, &ret, &Ctx::inference()).unwrap();
        let (_, d_logits) = cross_entropy(&fwd.logits, &[1]).unwrap();
        let mut grads = zeros_like(&model);
        model.vqa_backward(&fwd, &d_logits, &mut grads, EncoderGrads::All).unwrap();
        let flat = Tensor::vector(flatten(&model));
        let fd = finite_difference_gradient(
            |v| {
                let mut m = model.clone();
                unflatten(&mut m, v.data())?;
                loss(&m)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&Tensor::vector(flatten(&grads)), &fd);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn r0_matches_plain_forward_and_shapes() {
        let (c, vocab) = micro();
        let model: RammModel<f64> = RammModel::new(&c, 4).unwrap();
        let q = vocab.tokenize("what mri", c.max_text_len);
        let img = grid(5, &c);
        let pair = PairInput { text: &q, image: &img };
        let (a, _) = model.fuse_pairs(pair, &[], &Ctx::inference()).unwrap();
        let (t, i) = (
            model.text.forward(&q, &Ctx::inference(), 0).unwrap().0,
            model.image.forward(&img, &Ctx::inference(), 0).unwrap().0,
        );
        let mut state = FusionState::new(vec![t], vec![i]).unwrap();
        for layer in &model.fusion {
            state = layer.forward(&state, &Ctx::inference(), false).unwrap().0;
        }
        assert_eq!(a.text, state.text[0]);
        assert_eq!(a.image, state.image[0]);
        assert_eq!(a.text.shape(), &[3, c.d]);
        assert_eq!(a.image.shape(), &[c.n_patches() + 1, c.d]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (c, vocab) = micro();
        let model: RammModel<f32> = RammModel::new(&c, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &c, &vocab).unwrap();
        let (back, c2, v2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(c2, c);
        assert_eq!(v2, vocab);
        assert!(matches!(
            load_checkpoint(&dir.path().join("absent")),
            Err(RammError::MissingArtifact(_))
        ));
    }
}
