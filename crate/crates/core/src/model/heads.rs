//! Output heads on top of the fused CLS rows and text states.

use super::layers::{apply_mask, Ctx, Init, LayerNorm, Linear};
use super::params::impl_params;
use crate::error::Result;
use crate::tensor::ops::{self, LayerNormCache};
use crate::tensor::{Real, Tensor};

const VQA_SITE: u64 = 0x7a9a;

/// `[w_cls ; v_cls]` as a `1 × 2d` row.
pub fn concat_cls<T: Real>(w_cls: &[T], v_cls: &[T]) -> Tensor<T> {
    let mut row = w_cls.to_vec();
    row.extend_from_slice(v_cls);
    let n = row.len();
    Tensor::new(vec![1, n], row).expect("non-empty cls rows")
}

fn split_cls<T: Real>(d_joint: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let d = d_joint.cols() / 2;
    (d_joint.data()[..d].to_vec(), d_joint.data()[d..].to_vec())
}

/// Two-layer MLP over the concatenated CLS vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaHead<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}
impl_params!(VqaHead { hidden, out });

#[derive(Clone, Debug)]
pub struct VqaCache<T> {
    joint: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
    mask: Option<Tensor<T>>,
}

impl<T: Real> VqaHead<T> {
    pub fn new(init: &mut Init, d: usize, n_answers: usize) -> Self {
        VqaHead {
            hidden: Linear::new(init, 2 * d, d),
            out: Linear::new(init, d, n_answers),
        }
    }

    /// Logits as a `1 × n_answers` row.
    pub fn forward(&self, w_cls: &[T], v_cls: &[T], ctx: &Ctx) -> Result<(Tensor<T>, VqaCache<T>)> {
        let joint = concat_cls(w_cls, v_cls);
        let pre = self.hidden.forward(&joint)?;
        let mut act = ops::gelu(&pre);
        let mask = ctx.mask(VQA_SITE, act.shape());
        apply_mask(&mut act, &mask);
        let logits = self.out.forward(&act)?;
        Ok((logits, VqaCache { joint, pre, act, mask }))
    }

    /// Gradients with respect to `(w_cls, v_cls)`.
    pub fn backward(&self, cache: &VqaCache<T>, d_logits: &Tensor<T>, grads: &mut Self) -> Result<(Vec<T>, Vec<T>)> {
        let mut d_act = self.out.backward(&cache.act, d_logits, &mut grads.out)?;
        apply_mask(&mut d_act, &cache.mask);
        let d_pre = ops::gelu_backward(&cache.pre, &d_act)?;
        let d_joint = self.hidden.backward(&cache.joint, &d_pre, &mut grads.hidden)?;
        Ok(split_cls(&d_joint))
    }
}

/// Match / no-match classifier; class 1 means matched.
#[derive(Clone, Debug, PartialEq)]
pub struct ItmHead<T> {
    pub lin: Linear<T>,
}
impl_params!(ItmHead { lin });

impl<T: Real> ItmHead<T> {
    pub fn new(init: &mut Init, d: usize) -> Self {
        ItmHead {
            lin: Linear::new(init, 2 * d, 2),
        }
    }

    /// Logits as a `1 × 2` row, plus the joint input for backward.
    pub fn forward(&self, w_cls: &[T], v_cls: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let joint = concat_cls(w_cls, v_cls);
        Ok((self.lin.forward(&joint)?, joint))
    }

    pub fn backward(&self, joint: &Tensor<T>, d_logits: &Tensor<T>, grads: &mut Self) -> Result<(Vec<T>, Vec<T>)> {
        let d_joint = self.lin.backward(joint, d_logits, &mut grads.lin)?;
        Ok(split_cls(&d_joint))
    }
}

/// Per-position vocabulary logits over the fused text states.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead<T> {
    pub ln: LayerNorm<T>,
    pub lin: Linear<T>,
}
impl_params!(MlmHead { ln, lin });

#[derive(Clone, Debug)]
pub struct MlmCache<T> {
    ln: LayerNormCache<T>,
    normed: Tensor<T>,
}

impl<T: Real> MlmHead<T> {
    pub fn new(init: &mut Init, d: usize, vocab: usize) -> Self {
        MlmHead {
            ln: LayerNorm::new(d),
            lin: Linear::new(init, d, vocab),
        }
    }

    /// `w_l` is `(n+1) × d`; logits are `(n+1) × vocab`.
    pub fn forward(&self, w_l: &Tensor<T>) -> Result<(Tensor<T>, MlmCache<T>)> {
        let (normed, ln) = self.ln.forward(w_l)?;
        let logits = self.lin.forward(&normed)?;
        Ok((logits, MlmCache { ln, normed }))
    }

    pub fn backward(&self, cache: &MlmCache<T>, d_logits: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let d_n = self.lin.backward(&cache.normed, d_logits, &mut grads.lin)?;
        self.ln.backward(&cache.ln, &d_n, &mut grads.ln)
    }
}
