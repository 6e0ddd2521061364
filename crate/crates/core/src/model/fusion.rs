//! Dual-stream co-attention fusion over `r + 1` parallel streams.
//!
//! Stream 0 is the original sample, streams `1..=r` are retrieved pairs.
//! Every stream runs the same self- and cross-attention weights
//! independently. Retrieval-attention then lets the CLS row of stream 0
//! attend over the CLS rows of all streams (itself included) and adds the
//! result to stream 0's CLS only. Sublayer order is
//! self → cross → retrieval → FFN, each pre-norm with a residual.

use super::layers::{apply_mask, site, Ctx, FeedForward, FfnCache, Init, LayerNorm, MhaCache, MultiHeadAttention};
use super::params::impl_params;
use crate::error::{RammError, Result};
use crate::tensor::ops::LayerNormCache;
use crate::tensor::{Real, Tensor};

const FUSE_SITE: u64 = 0xf05e;
const SUB_SELF: u64 = 1;
const SUB_CROSS: u64 = 2;
const SUB_RET: u64 = 3;
const SUB_FFN: u64 = 4;
const MOD_TEXT: u64 = 0;
const MOD_IMAGE: u64 = 16;

/// Per-modality weights of one fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBranch<T> {
    pub ln_self: LayerNorm<T>,
    pub self_attn: MultiHeadAttention<T>,
    pub ln_cross: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub ln_ret: LayerNorm<T>,
    pub ret_attn: MultiHeadAttention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}
impl_params!(ModalityBranch { ln_self, self_attn, ln_cross, cross_attn, ln_ret, ret_attn, ln_ffn, ffn });

impl<T: Real> ModalityBranch<T> {
    fn new(init: &mut Init, d: usize, n_head: usize, d_ff: usize) -> Self {
        ModalityBranch {
            ln_self: LayerNorm::new(d),
            self_attn: MultiHeadAttention::new(init, d, n_head),
            ln_cross: LayerNorm::new(d),
            cross_attn: MultiHeadAttention::new(init, d, n_head),
            ln_ret: LayerNorm::new(d),
            ret_attn: MultiHeadAttention::new(init, d, n_head),
            ln_ffn: LayerNorm::new(d),
            ffn: FeedForward::new(init, d, d_ff),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer<T> {
    pub text: ModalityBranch<T>,
    pub image: ModalityBranch<T>,
}
impl_params!(FusionLayer { text, image });

/// Hidden states of all streams entering (or leaving) a fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState<T> {
    pub text: Vec<Tensor<T>>,
    pub image: Vec<Tensor<T>>,
    pub layer_index: usize,
}

impl<T: Real> FusionState<T> {
    pub fn new(text: Vec<Tensor<T>>, image: Vec<Tensor<T>>) -> Result<Self> {
        if text.is_empty() || text.len() != image.len() {
            return Err(RammError::Contract(format!(
                "need matching non-empty stream lists, got {} text and {} image",
                text.len(),
                image.len()
            )));
        }
        let d = text[0].cols();
        if let Some(bad) = text.iter().chain(&image).find(|t| t.rank() != 2 || t.cols() != d) {
            return Err(RammError::Dimension {
                op: "fusion state",
                lhs: bad.shape().to_vec(),
                rhs: vec![d],
            });
        }
        Ok(FusionState {
            text,
            image,
            layer_index: 0,
        })
    }

    /// Number of retrieved streams.
    pub fn r(&self) -> usize {
        self.text.len() - 1
    }
}

#[derive(Clone, Debug)]
struct SelfCache<T> {
    ln: LayerNormCache<T>,
    attn: MhaCache<T>,
    mask: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct CrossCache<T> {
    ln_t: LayerNormCache<T>,
    ln_i: LayerNormCache<T>,
    attn_t: MhaCache<T>,
    attn_i: MhaCache<T>,
    mask_t: Option<Tensor<T>>,
    mask_i: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct RetCache<T> {
    ln: LayerNormCache<T>,
    attn: MhaCache<T>,
    mask: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct FfnSubCache<T> {
    ln: LayerNormCache<T>,
    ffn: FfnCache<T>,
    mask: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct FusionLayerCache<T> {
    self_t: Vec<SelfCache<T>>,
    self_i: Vec<SelfCache<T>>,
    cross: Vec<CrossCache<T>>,
    ret_t: Option<RetCache<T>>,
    ret_i: Option<RetCache<T>>,
    ffn_t: Vec<FfnSubCache<T>>,
    ffn_i: Vec<FfnSubCache<T>>,
}

fn self_sub<T: Real>(
    b: &ModalityBranch<T>,
    x: &Tensor<T>,
    ctx: &Ctx,
    site_id: u64,
) -> Result<(Tensor<T>, SelfCache<T>)> {
    let (n, ln) = b.ln_self.forward(x)?;
    let (mut a, attn) = b.self_attn.forward(&n, &n)?;
    let mask = ctx.mask(site_id, a.shape());
    apply_mask(&mut a, &mask);
    Ok((x.add(&a)?, SelfCache { ln, attn, mask }))
}

fn self_sub_backward<T: Real>(
    b: &ModalityBranch<T>,
    c: &SelfCache<T>,
    d_y: &Tensor<T>,
    g: &mut ModalityBranch<T>,
) -> Result<Tensor<T>> {
    let mut d_a = d_y.clone();
    apply_mask(&mut d_a, &c.mask);
    let (dq, dkv) = b.self_attn.backward(&c.attn, &d_a, &mut g.self_attn)?;
    let mut dx = b.ln_self.backward(&c.ln, &dq.add(&dkv)?, &mut g.ln_self)?;
    dx.add_assign(d_y)?;
    Ok(dx)
}

fn ffn_sub<T: Real>(
    b: &ModalityBranch<T>,
    x: &Tensor<T>,
    ctx: &Ctx,
    site_id: u64,
) -> Result<(Tensor<T>, FfnSubCache<T>)> {
    let (n, ln) = b.ln_ffn.forward(x)?;
    let (mut f, ffn) = b.ffn.forward(&n)?;
    let mask = ctx.mask(site_id, f.shape());
    apply_mask(&mut f, &mask);
    Ok((x.add(&f)?, FfnSubCache { ln, ffn, mask }))
}

fn ffn_sub_backward<T: Real>(
    b: &ModalityBranch<T>,
    c: &FfnSubCache<T>,
    d_y: &Tensor<T>,
    g: &mut ModalityBranch<T>,
) -> Result<Tensor<T>> {
    let mut d_f = d_y.clone();
    apply_mask(&mut d_f, &c.mask);
    let d_n = b.ffn.backward(&c.ffn, &d_f, &mut g.ffn)?;
    let mut dx = b.ln_ffn.backward(&c.ln, &d_n, &mut g.ln_ffn)?;
    dx.add_assign(d_y)?;
    Ok(dx)
}

/// Single-query attention from stream 0's CLS over all CLS rows; the
/// output is added to `streams[0]` row 0 only.
fn retrieval_sub<T: Real>(
    b: &ModalityBranch<T>,
    streams: &mut [Tensor<T>],
    ctx: &Ctx,
    site_id: u64,
) -> Result<RetCache<T>> {
    let cls: Vec<&[T]> = streams.iter().map(|s| s.row(0)).collect();
    let c = Tensor::stack_rows(&cls)?;
    let (cn, ln) = b.ln_ret.forward(&c)?;
    let query = cn.slice_rows(0, 1);
    let (mut out, attn) = b.ret_attn.forward(&query, &cn)?;
    let mask = ctx.mask(site_id, out.shape());
    apply_mask(&mut out, &mask);
    streams[0]
        .row_mut(0)
        .iter_mut()
        .zip(out.data())
        .for_each(|(a, &o)| *a += o);
    Ok(RetCache { ln, attn, mask })
}

fn retrieval_sub_backward<T: Real>(
    b: &ModalityBranch<T>,
    c: &RetCache<T>,
    d_streams: &mut [Tensor<T>],
    g: &mut ModalityBranch<T>,
) -> Result<()> {
    let mut d_out = Tensor::vector(d_streams[0].row(0).to_vec()).reshape(&[1, d_streams[0].cols()])?;
    apply_mask(&mut d_out, &c.mask);
    let (d_q, mut d_cn) = b.ret_attn.backward(&c.attn, &d_out, &mut g.ret_attn)?;
    d_cn.row_mut(0)
        .iter_mut()
        .zip(d_q.data())
        .for_each(|(a, &q)| *a += q);
    let d_c = b.ln_ret.backward(&c.ln, &d_cn, &mut g.ln_ret)?;
    for (j, s) in d_streams.iter_mut().enumerate() {
        s.row_mut(0)
            .iter_mut()
            .zip(d_c.row(j))
            .for_each(|(a, &v)| *a += v);
    }
    Ok(())
}

impl<T: Real> FusionLayer<T> {
    pub fn new(init: &mut Init, d: usize, n_head: usize, d_ff: usize) -> Self {
        FusionLayer {
            text: ModalityBranch::new(init, d, n_head, d_ff),
            image: ModalityBranch::new(init, d, n_head, d_ff),
        }
    }

    fn self_cross(
        &self,
        state: &FusionState<T>,
        ctx: &Ctx,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, Vec<SelfCache<T>>, Vec<SelfCache<T>>, Vec<CrossCache<T>>)> {
        let layer = state.layer_index;
        let n = state.text.len();
        let (mut ws, mut vs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut self_t, mut self_i, mut cross) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..n {
            let (w1, st) = self_sub(&self.text, &state.text[j], ctx, site(FUSE_SITE, layer, SUB_SELF | MOD_TEXT, j))?;
            let (v1, si) = self_sub(&self.image, &state.image[j], ctx, site(FUSE_SITE, layer, SUB_SELF | MOD_IMAGE, j))?;
            // Both directions read the post-self-attention states.
            let (wn, ln_t) = self.text.ln_cross.forward(&w1)?;
            let (vn, ln_i) = self.image.ln_cross.forward(&v1)?;
            let (mut ct, attn_t) = self.text.cross_attn.forward(&wn, &vn)?;
            let (mut ci, attn_i) = self.image.cross_attn.forward(&vn, &wn)?;
            let mask_t = ctx.mask(site(FUSE_SITE, layer, SUB_CROSS | MOD_TEXT, j), ct.shape());
            let mask_i = ctx.mask(site(FUSE_SITE, layer, SUB_CROSS | MOD_IMAGE, j), ci.shape());
            apply_mask(&mut ct, &mask_t);
            apply_mask(&mut ci, &mask_i);
            ws.push(w1.add(&ct)?);
            vs.push(v1.add(&ci)?);
            self_t.push(st);
            self_i.push(si);
            cross.push(CrossCache {
                ln_t,
                ln_i,
                attn_t,
                attn_i,
                mask_t,
                mask_i,
            });
        }
        Ok((ws, vs, self_t, self_i, cross))
    }

    /// One fusion layer over every stream. With `retrieval_enabled` false, or
    /// no retrieved streams, the retrieval sublayer is skipped entirely.
    pub fn forward(
        &self,
        state: &FusionState<T>,
        ctx: &Ctx,
        retrieval_enabled: bool,
    ) -> Result<(FusionState<T>, FusionLayerCache<T>)> {
        let layer = state.layer_index;
        let (mut ws, mut vs, self_t, self_i, cross) = self.self_cross(state, ctx)?;
        let (ret_t, ret_i) = if retrieval_enabled && state.r() >= 1 {
            (
                Some(retrieval_sub(&self.text, &mut ws, ctx, site(FUSE_SITE, layer, SUB_RET | MOD_TEXT, 0))?),
                Some(retrieval_sub(&self.image, &mut vs, ctx, site(FUSE_SITE, layer, SUB_RET | MOD_IMAGE, 0))?),
            )
        } else {
            (None, None)
        };
        let n = ws.len();
        let (mut text, mut image) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut ffn_t, mut ffn_i) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for j in 0..n {
            let (w, ct) = ffn_sub(&self.text, &ws[j], ctx, site(FUSE_SITE, layer, SUB_FFN | MOD_TEXT, j))?;
            let (v, ci) = ffn_sub(&self.image, &vs[j], ctx, site(FUSE_SITE, layer, SUB_FFN | MOD_IMAGE, j))?;
            text.push(w);
            image.push(v);
            ffn_t.push(ct);
            ffn_i.push(ci);
        }
        Ok((
            FusionState {
                text,
                image,
                layer_index: layer + 1,
            },
            FusionLayerCache {
                self_t,
                self_i,
                cross,
                ret_t,
                ret_i,
                ffn_t,
                ffn_i,
            },
        ))
    }

    /// Self- and cross-attention only; the state retrieval-attention consumes.
    pub fn self_cross_state(&self, state: &FusionState<T>, ctx: &Ctx) -> Result<FusionState<T>> {
        let (text, image, ..) = self.self_cross(state, ctx)?;
        Ok(FusionState {
            text,
            image,
            layer_index: state.layer_index,
        })
    }

    /// Retrieval-attention on a post-cross-attention state. Requires r ≥ 1;
    /// callers skip it when nothing was retrieved.
    pub fn retrieval_attention(&self, state_after_cross: &FusionState<T>, ctx: &Ctx) -> Result<FusionState<T>> {
        if state_after_cross.r() == 0 {
            return Err(RammError::Contract(
                "retrieval-attention needs at least one retrieved stream; skip it when r = 0".into(),
            ));
        }
        let layer = state_after_cross.layer_index;
        let mut out = state_after_cross.clone();
        retrieval_sub(&self.text, &mut out.text, ctx, site(FUSE_SITE, layer, SUB_RET | MOD_TEXT, 0))?;
        retrieval_sub(&self.image, &mut out.image, ctx, site(FUSE_SITE, layer, SUB_RET | MOD_IMAGE, 0))?;
        Ok(out)
    }

    /// Gradients with respect to every input stream.
    pub fn backward(
        &self,
        cache: &FusionLayerCache<T>,
        d_text: &[Tensor<T>],
        d_image: &[Tensor<T>],
        grads: &mut Self,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let n = d_text.len();
        let mut dws = Vec::with_capacity(n);
        let mut dvs = Vec::with_capacity(n);
        for j in 0..n {
            dws.push(ffn_sub_backward(&self.text, &cache.ffn_t[j], &d_text[j], &mut grads.text)?);
            dvs.push(ffn_sub_backward(&self.image, &cache.ffn_i[j], &d_image[j], &mut grads.image)?);
        }
        if let Some(c) = &cache.ret_t {
            retrieval_sub_backward(&self.text, c, &mut dws, &mut grads.text)?;
        }
        if let Some(c) = &cache.ret_i {
            retrieval_sub_backward(&self.image, c, &mut dvs, &mut grads.image)?;
        }
        let mut d_in_t = Vec::with_capacity(n);
        let mut d_in_i = Vec::with_capacity(n);
        for j in 0..n {
            let c = &cache.cross[j];
            let mut d_ct = dws[j].clone();
            apply_mask(&mut d_ct, &c.mask_t);
            let mut d_ci = dvs[j].clone();
            apply_mask(&mut d_ci, &c.mask_i);
            let (d_wn_q, d_vn_kv) = self.text.cross_attn.backward(&c.attn_t, &d_ct, &mut grads.text.cross_attn)?;
            let (d_vn_q, d_wn_kv) = self.image.cross_attn.backward(&c.attn_i, &d_ci, &mut grads.image.cross_attn)?;
            let mut d_w1 = self.text.ln_cross.backward(&c.ln_t, &d_wn_q.add(&d_wn_kv)?, &mut grads.text.ln_cross)?;
            let mut d_v1 = self.image.ln_cross.backward(&c.ln_i, &d_vn_q.add(&d_vn_kv)?, &mut grads.image.ln_cross)?;
            d_w1.add_assign(&dws[j])?;
            d_v1.add_assign(&dvs[j])?;
            d_in_t.push(self_sub_backward(&self.text, &cache.self_t[j], &d_w1, &mut grads.text)?);
            d_in_i.push(self_sub_backward(&self.image, &cache.self_i[j], &d_v1, &mut grads.image)?);
        }
        Ok((d_in_t, d_in_i))
    }
}

/// Final stream-0 representations `(w_L^0, v_L^0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseOutput<T> {
    pub text: Tensor<T>,
    pub image: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FuseCache<T> {
    layers: Vec<FusionLayerCache<T>>,
    shapes_t: Vec<Vec<usize>>,
    shapes_i: Vec<Vec<usize>>,
}

/// Run all fusion layers and return stream 0's final states.
pub fn fuse<T: Real>(
    layers: &[FusionLayer<T>],
    text0: &Tensor<T>,
    image0: &Tensor<T>,
    retrieved: &[(Tensor<T>, Tensor<T>)],
    ctx: &Ctx,
) -> Result<(FuseOutput<T>, FuseCache<T>)> {
    let mut text = vec![text0.clone()];
    let mut image = vec![image0.clone()];
    for (t, i) in retrieved {
        text.push(t.clone());
        image.push(i.clone());
    }
    let mut state = FusionState::new(text, image)?;
    let shapes_t = state.text.iter().map(|t| t.shape().to_vec()).collect();
    let shapes_i = state.image.iter().map(|t| t.shape().to_vec()).collect();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, cache) = layer.forward(&state, ctx, true)?;
        state = next;
        caches.push(cache);
    }
    let mut text = state.text;
    let mut image = state.image;
    Ok((
        FuseOutput {
            text: text.swap_remove(0),
            image: image.swap_remove(0),
        },
        FuseCache {
            layers: caches,
            shapes_t,
            shapes_i,
        },
    ))
}

/// Gradients for every input stream given gradients on `(w_L^0, v_L^0)`.
pub fn fuse_backward<T: Real>(
    layers: &[FusionLayer<T>],
    cache: &FuseCache<T>,
    d_text0: &Tensor<T>,
    d_image0: &Tensor<T>,
    grads: &mut [FusionLayer<T>],
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut d_t: Vec<Tensor<T>> = cache.shapes_t.iter().map(|s| Tensor::zeros(s)).collect();
    let mut d_i: Vec<Tensor<T>> = cache.shapes_i.iter().map(|s| Tensor::zeros(s)).collect();
    d_t[0] = d_text0.clone();
    d_i[0] = d_image0.clone();
    for ((layer, c), g) in layers.iter().zip(&cache.layers).zip(grads.iter_mut()).rev() {
        let (nt, ni) = layer.backward(c, &d_t, &d_i, g)?;
        d_t = nt;
        d_i = ni;
    }
    Ok((d_t, d_i))
}
