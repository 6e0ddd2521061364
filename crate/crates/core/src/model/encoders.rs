//! Uni-modal encoders and the contrastive projection heads.

use super::layers::{site, BlockCache, Ctx, EncoderBlock, Init, LayerNorm, Linear};
use super::params::impl_params;
use super::vocab::TokenSequence;
use crate::error::{RammError, Result};
use crate::tensor::ops::{self, LayerNormCache};
use crate::tensor::{Real, Tensor};

const TEXT_SITE: u64 = 0x7e47;
const IMAGE_SITE: u64 = 0x1a6e;

/// Raw patch features `[m × d_patch]`; the CLS slot is added at encode time.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    patches: Tensor<T>,
}

impl<T: Real> PatchGrid<T> {
    /// Accepts `[m, d_patch]` or `[g, g, d_patch]`; `m` must equal `grid²`.
    pub fn new(t: Tensor<T>, grid: usize) -> Result<Self> {
        let shape = t.shape().to_vec();
        let t = match shape.as_slice() {
            [m, dp] if *m == grid * grid => t.reshape(&[*m, *dp])?,
            [g1, g2, dp] if *g1 == grid && *g2 == grid => t.reshape(&[g1 * g2, *dp])?,
            _ => {
                return Err(RammError::Dimension {
                    op: "patch grid",
                    lhs: shape,
                    rhs: vec![grid, grid],
                })
            }
        };
        Ok(PatchGrid { patches: t })
    }

    pub fn patches(&self) -> &Tensor<T> {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub ln_out: LayerNorm<T>,
}
impl_params!(TextEncoder { tok_emb, pos_emb, blocks, ln_out });

#[derive(Clone, Debug)]
pub struct TextCache<T> {
    ids: Vec<u32>,
    blocks: Vec<BlockCache<T>>,
    ln_out: LayerNormCache<T>,
}

impl<T: Real> TextEncoder<T> {
    pub fn new(init: &mut Init, vocab: usize, max_len: usize, d: usize, n_head: usize, d_ff: usize, layers: usize) -> Self {
        TextEncoder {
            tok_emb: init.normal(&[vocab, d], 1.0),
            pos_emb: init.normal(&[max_len, d], 0.1),
            blocks: (0..layers).map(|_| EncoderBlock::new(init, d, n_head, d_ff)).collect(),
            ln_out: LayerNorm::new(d),
        }
    }

    /// `[(n+1) × d]`; row 0 is the CLS representation.
    pub fn forward(&self, seq: &TokenSequence, ctx: &Ctx, stream: usize) -> Result<(Tensor<T>, TextCache<T>)> {
        let (vocab, d) = (self.tok_emb.rows(), self.tok_emb.cols());
        let ids = seq.ids();
        if ids.len() > self.pos_emb.rows() {
            return Err(RammError::Index {
                what: "text position",
                index: ids.len() - 1,
                bound: self.pos_emb.rows(),
            });
        }
        let mut x = Tensor::zeros(&[ids.len(), d]);
        for (p, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(RammError::Index {
                    what: "token id",
                    index: id as usize,
                    bound: vocab,
                });
            }
            let (e, pe) = (self.tok_emb.row(id as usize), self.pos_emb.row(p));
            for ((o, &a), &b) in x.row_mut(p).iter_mut().zip(e).zip(pe) {
                *o = a + b;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward(&x, ctx, site(TEXT_SITE, l, 0, stream))?;
            x = y;
            caches.push(c);
        }
        let (out, ln_out) = self.ln_out.forward(&x)?;
        Ok((
            out,
            TextCache {
                ids: ids.to_vec(),
                blocks: caches,
                ln_out,
            },
        ))
    }

    pub fn backward(&self, cache: &TextCache<T>, d_out: &Tensor<T>, grads: &mut Self) -> Result<()> {
        let mut dx = self.ln_out.backward(&cache.ln_out, d_out, &mut grads.ln_out)?;
        for (block, (c, g)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            dx = block.backward(c, &dx, g)?;
        }
        for (p, &id) in cache.ids.iter().enumerate() {
            let dr = dx.row(p).to_vec();
            grads.tok_emb
                .row_mut(id as usize)
                .iter_mut()
                .zip(&dr)
                .for_each(|(a, &b)| *a += b);
            grads.pos_emb
                .row_mut(p)
                .iter_mut()
                .zip(&dr)
                .for_each(|(a, &b)| *a += b);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder<T> {
    pub patch_proj: Linear<T>,
    pub cls: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub ln_out: LayerNorm<T>,
}
impl_params!(ImageEncoder { patch_proj, cls, pos_emb, blocks, ln_out });

#[derive(Clone, Debug)]
pub struct ImageCache<T> {
    patches: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    ln_out: LayerNormCache<T>,
}

impl<T: Real> ImageEncoder<T> {
    pub fn new(init: &mut Init, n_patches: usize, d_patch: usize, d: usize, n_head: usize, d_ff: usize, layers: usize) -> Self {
        ImageEncoder {
            patch_proj: Linear::new(init, d_patch, d),
            cls: init.normal(&[1, d], 1.0),
            pos_emb: init.normal(&[n_patches + 1, d], 0.1),
            blocks: (0..layers).map(|_| EncoderBlock::new(init, d, n_head, d_ff)).collect(),
            ln_out: LayerNorm::new(d),
        }
    }

    /// `[(m+1) × d]`; row 0 is the CLS representation.
    pub fn forward(&self, img: &PatchGrid<T>, ctx: &Ctx, stream: usize) -> Result<(Tensor<T>, ImageCache<T>)> {
        let patches = img.patches();
        if patches.cols() != self.patch_proj.w.rows() || patches.rows() + 1 != self.pos_emb.rows() {
            return Err(RammError::Dimension {
                op: "encode_image",
                lhs: patches.shape().to_vec(),
                rhs: vec![self.pos_emb.rows() - 1, self.patch_proj.w.rows()],
            });
        }
        let proj = self.patch_proj.forward(patches)?;
        let d = proj.cols();
        let mut x = Tensor::zeros(&[proj.rows() + 1, d]);
        x.row_mut(0).copy_from_slice(self.cls.data());
        for i in 0..proj.rows() {
            x.row_mut(i + 1).copy_from_slice(proj.row(i));
        }
        x.add_assign(&self.pos_emb)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward(&x, ctx, site(IMAGE_SITE, l, 0, stream))?;
            x = y;
            caches.push(c);
        }
        let (out, ln_out) = self.ln_out.forward(&x)?;
        Ok((
            out,
            ImageCache {
                patches: patches.clone(),
                blocks: caches,
                ln_out,
            },
        ))
    }

    pub fn backward(&self, cache: &ImageCache<T>, d_out: &Tensor<T>, grads: &mut Self) -> Result<()> {
        let mut dx = self.ln_out.backward(&cache.ln_out, d_out, &mut grads.ln_out)?;
        for (block, (c, g)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            dx = block.backward(c, &dx, g)?;
        }
        grads.pos_emb.add_assign(&dx)?;
        grads.cls
            .data_mut()
            .iter_mut()
            .zip(dx.row(0))
            .for_each(|(a, &b)| *a += b);
        let d_proj = dx.slice_rows(1, dx.rows());
        self.patch_proj
            .backward(&cache.patches, &d_proj, &mut grads.patch_proj)?;
        Ok(())
    }
}

/// Linear map into the contrastive space followed by L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T> {
    pub lin: Linear<T>,
}
impl_params!(ProjectionHead { lin });

#[derive(Clone, Debug)]
pub struct ProjectionCache<T> {
    input: Tensor<T>,
    out: Tensor<T>,
    norm: T,
}

pub(crate) const NORM_EPS: f64 = 1e-12;

impl<T: Real> ProjectionHead<T> {
    pub fn new(init: &mut Init, d: usize, d_proj: usize) -> Self {
        ProjectionHead {
            lin: Linear::new(init, d, d_proj),
        }
    }

    /// Unit vector `[d_proj]` for one CLS row.
    pub fn project(&self, cls: &[T]) -> Result<(Tensor<T>, ProjectionCache<T>)> {
        let input = Tensor::vector(cls.to_vec());
        let pre = self.lin.forward(&input)?.reshape(&[self.lin.w.cols()])?;
        let (out, norm) = ops::l2_normalize(&pre, T::lit(NORM_EPS));
        Ok((out.clone(), ProjectionCache { input, out, norm }))
    }

    /// Gradient with respect to the CLS row.
    pub fn backward(&self, cache: &ProjectionCache<T>, d_out: &Tensor<T>, grads: &mut Self) -> Result<Vec<T>> {
        let d_pre = ops::l2_normalize_backward(&cache.out, cache.norm, d_out)?;
        let d_pre = d_pre.reshape(&[1, self.lin.w.cols()])?;
        let dx = self.lin.backward(&cache.input, &d_pre, &mut grads.lin)?;
        Ok(dx.into_data())
    }
}
