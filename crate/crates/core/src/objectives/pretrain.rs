//! One pretraining step: ITC over the batch, ITM on matched and shuffled
//! pairs, MLM on masked captions, summed without weights.
//!
//! Per-sample work runs under the caller's [`Exec`]; every sample writes its
//! own gradient buffer and the buffers are summed in sample order, so the
//! sequential and parallel policies give identical bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::losses::{itc_loss_with_grad, itm_loss, mask_tokens, mlm_loss, momentum_targets, MaskedTokens};
use super::sum_in_order;
use crate::error::{RammError, Result};
use crate::exec::Exec;
use crate::model::encoders::ProjectionCache;
use crate::model::fusion::{fuse, fuse_backward};
use crate::model::layers::{seed_of, Ctx};
use crate::model::params::zeros_like;
use crate::model::{Encoded, PairInput, PatchGrid, RammModel, TokenSequence};
use crate::tensor::{Real, Tensor};

const TAG_MLM: u64 = 0x313;
const TAG_ITM: u64 = 0x17e;
const PASS_ENCODE: u64 = 0;
const PASS_MASKED: u64 = 1;
const PASS_POS: u64 = 2;
const PASS_NEG: u64 = 3;
const PASS_MLM: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPair<T> {
    pub text: TokenSequence,
    pub image: PatchGrid<T>,
}

/// Random choices of one step, fixed before any forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPlan {
    pub masked: Vec<MaskedTokens>,
    /// Caption index paired with image `i` for its ITM negative; never `i`.
    pub negative_text: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainLosses {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
}

impl PretrainLosses {
    pub fn total(&self) -> f64 {
        self.itc + self.itm + self.mlm
    }
}

/// Uniform random derangement (Sattolo's algorithm yields a single cycle).
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

pub fn plan_batch<T>(batch: &[PretrainPair<T>], cfg: &TrainConfig, vocab_size: usize, step: u64) -> Result<PretrainPlan> {
    if batch.len() < 2 {
        return Err(RammError::Config("pretraining needs a batch of at least 2".into()));
    }
    let masked = batch
        .iter()
        .enumerate()
        .map(|(i, p)| mask_tokens(&p.text, cfg.mask_rate, vocab_size, seed_of(&[cfg.seed, step, i as u64, TAG_MLM])))
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainPlan {
        masked,
        negative_text: derangement(batch.len(), seed_of(&[cfg.seed, step, TAG_ITM])),
    })
}

struct Uni<T> {
    enc: Encoded<T>,
    text_vec: Tensor<T>,
    image_vec: Tensor<T>,
    text_cache: ProjectionCache<T>,
    image_cache: ProjectionCache<T>,
}

/// Dropout settings shared by every forward pass of a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCtx {
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

impl StepCtx {
    pub fn ctx(&self, pass: u64, sample: usize) -> Ctx {
        Ctx::train(self.dropout, self.seed, self.step, pass, sample as u64)
    }
}

fn stack<T: Real>(rows: Vec<&Tensor<T>>) -> Result<Tensor<T>> {
    Tensor::stack_rows(&rows.iter().map(|t| t.data()).collect::<Vec<_>>())
}

fn cls_grad<T: Real>(shape: &[usize], d_cls: &[T]) -> Tensor<T> {
    let mut d = Tensor::zeros(shape);
    d.row_mut(0).copy_from_slice(d_cls);
    d
}

/// Loss components and the summed gradient for one batch.
pub fn pretrain_loss_and_grad<T: Real>(
    model: &RammModel<T>,
    momentum: Option<&RammModel<T>>,
    batch: &[PretrainPair<T>],
    plan: &PretrainPlan,
    cfg: &TrainConfig,
    sc: StepCtx,
    exec: Exec,
) -> Result<(PretrainLosses, RammModel<T>)> {
    let b = batch.len();
    if b < 2 || plan.masked.len() != b || plan.negative_text.len() != b {
        return Err(RammError::Contract(format!("batch of {b} does not match its plan")));
    }
    let uni: Vec<Uni<T>> = exec.try_map(batch, |i, p| -> Result<Uni<T>> {
        let enc = model.encode(
            PairInput {
                text: &p.text,
                image: &p.image,
            },
            &sc.ctx(PASS_ENCODE, i),
            0,
        )?;
        let (text_vec, text_cache) = model.text_proj.project(enc.text.row(0))?;
        let (image_vec, image_cache) = model.image_proj.project(enc.image.row(0))?;
        Ok(Uni {
            enc,
            text_vec,
            image_vec,
            text_cache,
            image_cache,
        })
    })?;

    let tau = T::lit(cfg.itc_temperature);
    let text_m = stack(uni.iter().map(|u| &u.text_vec).collect())?;
    let image_m = stack(uni.iter().map(|u| &u.image_vec).collect())?;
    let targets = match momentum {
        Some(m) => {
            let vecs = exec.try_map(batch, |_, p| -> Result<(Tensor<T>, Tensor<T>)> {
                let e = m.encode(
                    PairInput {
                        text: &p.text,
                        image: &p.image,
                    },
                    &Ctx::inference(),
                    0,
                )?;
                Ok((m.project_text(e.text.row(0))?, m.project_image(e.image.row(0))?))
            })?;
            let t = stack(vecs.iter().map(|v| &v.0).collect())?;
            let v = stack(vecs.iter().map(|v| &v.1).collect())?;
            Some(momentum_targets(&t, &v, tau, T::lit(cfg.distill_weight))?)
        }
        None => None,
    };
    let itc = itc_loss_with_grad(&text_m, &image_m, tau, targets.as_ref())?;

    let inv_itm = T::lit(1.0 / (2 * b) as f64);
    let inv_b = T::lit(1.0 / b as f64);
    let per_sample = exec.try_map_range(b, |i| -> Result<(RammModel<T>, T, T)> {
        let mut g = zeros_like(model);
        let u = &uni[i];
        let d_w = model
            .text_proj
            .backward(&u.text_cache, &Tensor::vector(itc.d_text.row(i).to_vec()), &mut g.text_proj)?;
        let d_v = model
            .image_proj
            .backward(&u.image_cache, &Tensor::vector(itc.d_image.row(i).to_vec()), &mut g.image_proj)?;
        let mut d_text = cls_grad(u.enc.text.shape(), &d_w);
        let mut d_image = cls_grad(u.enc.image.shape(), &d_v);

        // ITM: matched pair, then image i with another sample's caption.
        let j = plan.negative_text[i];
        let mut itm_total = T::zero();
        for (text_src, label, pass) in [(i, 1usize, PASS_POS), (j, 0usize, PASS_NEG)] {
            let ctx = sc.ctx(pass, i);
            let t_states = &uni[text_src].enc.text;
            let (out, cache) = fuse(&model.fusion, t_states, &u.enc.image, &[], &ctx)?;
            let (logits, joint) = model.itm.forward(out.text.row(0), out.image.row(0))?;
            let (l, d_logits) = itm_loss(&logits, &[label])?;
            itm_total += l * inv_itm;
            let (dw, dv) = model.itm.backward(&joint, &d_logits.scale(inv_itm), &mut g.itm)?;
            let (dt, di) = fuse_backward(
                &model.fusion,
                &cache,
                &cls_grad(out.text.shape(), &dw),
                &cls_grad(out.image.shape(), &dv),
                &mut g.fusion,
            )?;
            d_image.add_assign(&di[0])?;
            if text_src == i {
                d_text.add_assign(&dt[0])?;
            } else {
                model.text_backward(&uni[text_src].enc, &dt[0], &mut g)?;
            }
        }

        // MLM on the masked caption fused with the same image.
        let m = &plan.masked[i];
        let (mt, m_cache) = model.text.forward(&m.input, &sc.ctx(PASS_MASKED, i), 0)?;
        let (out, cache) = fuse(&model.fusion, &mt, &u.enc.image, &[], &sc.ctx(PASS_MLM, i))?;
        let (logits, head_cache) = model.mlm.forward(&out.text)?;
        let (l_mlm, d_logits) = mlm_loss(&logits, &m.targets)?;
        let d_out = model.mlm.backward(&head_cache, &d_logits.scale(inv_b), &mut g.mlm)?;
        let (dt, di) = fuse_backward(&model.fusion, &cache, &d_out, &Tensor::zeros(out.image.shape()), &mut g.fusion)?;
        model.text.backward(&m_cache, &dt[0], &mut g.text)?;
        d_image.add_assign(&di[0])?;

        model.encode_backward(&u.enc, &d_text, &d_image, &mut g)?;
        Ok((g, itm_total, l_mlm * inv_b))
    })?;

    let mut losses = PretrainLosses {
        itc: itc.loss.to_f64_lossless(),
        ..Default::default()
    };
    let mut itm = T::zero();
    let mut mlm = T::zero();
    let mut grads = Vec::with_capacity(b);
    for (g, a, m) in per_sample {
        itm += a;
        mlm += m;
        grads.push(g);
    }
    losses.itm = itm.to_f64_lossless();
    losses.mlm = mlm.to_f64_lossless();
    Ok((losses, sum_in_order(grads)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Init;
    use crate::model::params::{flatten, unflatten};
    use crate::model::{ModelConfig, Vocab};
    use crate::tensor::{finite_difference_gradient, relative_error};

    fn setup() -> (ModelConfig, Vec<PretrainPair<f64>>, PretrainPlan, TrainConfig) {
        let vocab = Vocab::new(["ct", "mri", "lesion", "left", "right", "mass"]);
        let c = ModelConfig::micro(vocab.len());
        let caps = ["ct left lesion", "mri right mass", "lesion mass ct"];
        let batch: Vec<PretrainPair<f64>> = caps
            .iter()
            .enumerate()
            .map(|(k, t)| PretrainPair {
                text: vocab.tokenize(t, c.max_text_len),
                image: PatchGrid::new(Init::new(k as u64).normal(&[c.n_patches(), c.d_patch], 1.0), c.patch_grid).unwrap(),
            })
            .collect();
        let cfg = TrainConfig {
            itc_temperature: 0.5,
            mask_rate: 0.4,
            ..TrainConfig::default()
        };
        let plan = plan_batch(&batch, &cfg, c.vocab_size, 3).unwrap();
        (c, batch, plan, cfg)
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for n in 2..20 {
            for seed in 0..10 {
                let p = derangement(n, seed);
                assert!(p.iter().enumerate().all(|(i, &j)| i != j));
                let mut s = p.clone();
                s.sort();
                assert_eq!(s, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn pretrain_gradient_check() {
        let (c, batch, plan, cfg) = setup();
        let model: RammModel<f64> = RammModel::new(&c, 1).unwrap();
        let momentum: RammModel<f64> = RammModel::new(&c, 2).unwrap();
        let sc = StepCtx {
            dropout: 0.0,
            seed: 0,
            step: 3,
        };
        let (losses, grads) =
            pretrain_loss_and_grad(&model, Some(&momentum), &batch, &plan, &cfg, sc, Exec::Sequential).unwrap();
        assert!((losses.total() - (losses.itc + losses.itm + losses.mlm)).abs() < 1e-12);
        let flat = Tensor::vector(flatten(&model));
        let fd = finite_difference_gradient(
            |v| {
                let mut m = model.clone();
                unflatten(&mut m, v.data())?;
                let (l, _) = pretrain_loss_and_grad(&m, Some(&momentum), &batch, &plan, &cfg, sc, Exec::Sequential)?;
                Ok(l.total())
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&Tensor::vector(flatten(&grads)), &fd);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (c, batch, plan, cfg) = setup();
        let model: RammModel<f64> = RammModel::new(&c, 4).unwrap();
        let sc = StepCtx {
            dropout: 0.2,
            seed: 9,
            step: 3,
        };
        let a = pretrain_loss_and_grad(&model, None, &batch, &plan, &cfg, sc, Exec::Sequential).unwrap();
        let b = pretrain_loss_and_grad(&model, None, &batch, &plan, &cfg, sc, Exec::Parallel).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
