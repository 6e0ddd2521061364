//! Parameterized building blocks with explicit forward caches and
//! hand-written backward passes. Backward methods accumulate parameter
//! gradients into a structurally identical `grads` value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::impl_params;
use crate::error::Result;
use crate::tensor::ops::{self, AttentionCache, LayerNormCache};
use crate::tensor::{Real, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// splitmix64 finalizer; used to derive independent seeds from tuples.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seed_of(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Identifies one dropout call site: (module, layer, sublayer, stream).
pub fn site(module: u64, layer: usize, sublayer: u64, stream: usize) -> u64 {
    seed_of(&[module, layer as u64, sublayer, stream as u64])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutKey {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
    pub pass: u64,
    pub sample: u64,
}

/// Forward-pass context. Dropout masks are a pure function of
/// (seed, step, pass, sample, call site), so two passes with different
/// `pass` values see distinct masks and any pass can be replayed exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Ctx {
    pub dropout: Option<DropoutKey>,
}

impl Ctx {
    pub fn inference() -> Self {
        Ctx { dropout: None }
    }

    pub fn train(rate: f64, seed: u64, step: u64, pass: u64, sample: u64) -> Self {
        if rate <= 0.0 {
            return Ctx::inference();
        }
        Ctx {
            dropout: Some(DropoutKey {
                rate,
                seed,
                step,
                pass,
                sample,
            }),
        }
    }

    pub fn with_sample(mut self, sample: u64) -> Self {
        if let Some(k) = &mut self.dropout {
            k.sample = sample;
        }
        self
    }

    pub fn with_pass(mut self, pass: u64) -> Self {
        if let Some(k) = &mut self.dropout {
            k.pass = pass;
        }
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Inverted-dropout mask for a call site, or `None` at inference.
    pub fn mask<T: Real>(&self, site: u64, shape: &[usize]) -> Option<Tensor<T>> {
        let key = self.dropout?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed_of(&[key.seed, key.step, key.pass, key.sample, site]));
        let keep = T::lit(1.0 / (1.0 - key.rate));
        let u = Uniform::new(0.0f64, 1.0).expect("valid range");
        Some(Tensor::from_fn(shape, |_| {
            if u.sample(&mut rng) < key.rate {
                T::zero()
            } else {
                keep
            }
        }))
    }
}

pub(crate) fn apply_mask<T: Real>(x: &mut Tensor<T>, mask: &Option<Tensor<T>>) {
    if let Some(m) = mask {
        x.data_mut()
            .iter_mut()
            .zip(m.data())
            .for_each(|(v, &k)| *v *= k);
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(n.sample(rng)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}
impl_params!(Linear { w, b });

impl<T: Real> Linear<T> {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: init.normal(&[d_in, d_out], 1.0 / (d_in as f64).sqrt()),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.w, &self.b)
    }

    pub fn backward(&self, x: &Tensor<T>, d_out: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let (dx, dw, db) = ops::linear_backward(x, &self.w, d_out)?;
        grads.w.add_assign(&dw)?;
        grads.b.add_assign(&db)?;
        Ok(dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}
impl_params!(LayerNorm { gain, bias });

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(&[d], T::one()),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        ops::layer_norm(x, &self.gain, &self.bias, T::lit(LN_EPS))
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        d_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>> {
        let (dx, dg, db) = ops::layer_norm_backward(&self.gain, cache, d_out)?;
        grads.gain.add_assign(&dg)?;
        grads.bias.add_assign(&db)?;
        Ok(dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub n_head: usize,
}
impl_params!(MultiHeadAttention { q, k, v, o });

#[derive(Clone, Debug)]
pub struct MhaCache<T> {
    xq: Tensor<T>,
    xkv: Tensor<T>,
    qp: Tensor<T>,
    kp: Tensor<T>,
    vp: Tensor<T>,
    heads: Vec<AttentionCache<T>>,
    concat: Tensor<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(init: &mut Init, d: usize, n_head: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(init, d, d),
            k: Linear::new(init, d, d),
            v: Linear::new(init, d, d),
            o: Linear::new(init, d, d),
            n_head,
        }
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(&self, xq: &Tensor<T>, xkv: &Tensor<T>) -> Result<(Tensor<T>, MhaCache<T>)> {
        let qp = self.q.forward(xq)?;
        let kp = self.k.forward(xkv)?;
        let vp = self.v.forward(xkv)?;
        let d = qp.cols();
        let dh = d / self.n_head;
        let mut concat = Tensor::zeros(&[xq.rows(), d]);
        let mut heads = Vec::with_capacity(self.n_head);
        for h in 0..self.n_head {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (out, cache) = ops::scaled_dot_attention(
                &qp.slice_cols(s, e),
                &kp.slice_cols(s, e),
                &vp.slice_cols(s, e),
            )?;
            concat.set_cols(s, &out);
            heads.push(cache);
        }
        let out = self.o.forward(&concat)?;
        Ok((
            out,
            MhaCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                qp,
                kp,
                vp,
                heads,
                concat,
            },
        ))
    }

    /// Returns `(d_xq, d_xkv)`.
    pub fn backward(
        &self,
        cache: &MhaCache<T>,
        d_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let d_concat = self.o.backward(&cache.concat, d_out, &mut grads.o)?;
        let d = cache.qp.cols();
        let dh = d / self.n_head;
        let mut dq = Tensor::zeros(cache.qp.shape());
        let mut dk = Tensor::zeros(cache.kp.shape());
        let mut dv = Tensor::zeros(cache.vp.shape());
        for (h, hc) in cache.heads.iter().enumerate() {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (gq, gk, gv) = ops::scaled_dot_attention_backward(
                &cache.qp.slice_cols(s, e),
                &cache.kp.slice_cols(s, e),
                &cache.vp.slice_cols(s, e),
                hc,
                &d_concat.slice_cols(s, e),
            )?;
            dq.set_cols(s, &gq);
            dk.set_cols(s, &gk);
            dv.set_cols(s, &gv);
        }
        let d_xq = self.q.backward(&cache.xq, &dq, &mut grads.q)?;
        let mut d_xkv = self.k.backward(&cache.xkv, &dk, &mut grads.k)?;
        d_xkv.add_assign(&self.v.backward(&cache.xkv, &dv, &mut grads.v)?)?;
        Ok((d_xq, d_xkv))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}
impl_params!(FeedForward { up, down });

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new(init: &mut Init, d: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::new(init, d, d_ff),
            down: Linear::new(init, d_ff, d),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FfnCache<T>)> {
        let pre = self.up.forward(x)?;
        let act = ops::gelu(&pre);
        let out = self.down.forward(&act)?;
        Ok((
            out,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, cache: &FfnCache<T>, d_out: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let d_act = self.down.backward(&cache.act, d_out, &mut grads.down)?;
        let d_pre = ops::gelu_backward(&cache.pre, &d_act)?;
        self.up.backward(&cache.x, &d_pre, &mut grads.up)
    }
}

/// Pre-norm transformer encoder layer: `x + drop(attn(ln(x)))`, then
/// `x + drop(ffn(ln(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln_attn: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}
impl_params!(EncoderBlock { ln_attn, attn, ln_ffn, ffn });

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln_attn: LayerNormCache<T>,
    attn: MhaCache<T>,
    mask_attn: Option<Tensor<T>>,
    ln_ffn: LayerNormCache<T>,
    ffn: FfnCache<T>,
    mask_ffn: Option<Tensor<T>>,
}

impl<T: Real> EncoderBlock<T> {
    pub fn new(init: &mut Init, d: usize, n_head: usize, d_ff: usize) -> Self {
        EncoderBlock {
            ln_attn: LayerNorm::new(d),
            attn: MultiHeadAttention::new(init, d, n_head),
            ln_ffn: LayerNorm::new(d),
            ffn: FeedForward::new(init, d, d_ff),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx, site_id: u64) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (n1, ln_attn) = self.ln_attn.forward(x)?;
        let (mut a, attn) = self.attn.forward(&n1, &n1)?;
        let mask_attn = ctx.mask(site_id ^ 1, a.shape());
        apply_mask(&mut a, &mask_attn);
        let x1 = x.add(&a)?;
        let (n2, ln_ffn) = self.ln_ffn.forward(&x1)?;
        let (mut f, ffn) = self.ffn.forward(&n2)?;
        let mask_ffn = ctx.mask(site_id ^ 2, f.shape());
        apply_mask(&mut f, &mask_ffn);
        let y = x1.add(&f)?;
        Ok((
            y,
            BlockCache {
                ln_attn,
                attn,
                mask_attn,
                ln_ffn,
                ffn,
                mask_ffn,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache<T>, d_y: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let mut d_f = d_y.clone();
        apply_mask(&mut d_f, &cache.mask_ffn);
        let d_n2 = self.ffn.backward(&cache.ffn, &d_f, &mut grads.ffn)?;
        let mut d_x1 = self.ln_ffn.backward(&cache.ln_ffn, &d_n2, &mut grads.ln_ffn)?;
        d_x1.add_assign(d_y)?;

        let mut d_a = d_x1.clone();
        apply_mask(&mut d_a, &cache.mask_attn);
        let (dq, dkv) = self.attn.backward(&cache.attn, &d_a, &mut grads.attn)?;
        let d_n1 = dq.add(&dkv)?;
        let mut d_x = self.ln_attn.backward(&cache.ln_attn, &d_n1, &mut grads.ln_attn)?;
        d_x.add_assign(&d_x1)?;
        Ok(d_x)
    }
}
