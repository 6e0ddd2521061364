//! VQA fine-tuning loss: classification cross-entropy, optionally with the
//! R-Drop consistency term between two dropout passes.

use super::pretrain::StepCtx;
use super::sum_in_order;
use crate::error::{RammError, Result};
use crate::exec::Exec;
use crate::model::params::zeros_like;
use crate::model::{EncoderGrads, PairInput, PatchGrid, RammModel, TokenSequence};
use crate::tensor::ops::{cross_entropy, symmetric_kl_with_grad};
use crate::tensor::{Real, Tensor};

/// A question about an image with its gold answer class and the retrieved pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample<T> {
    pub question: TokenSequence,
    pub image: PatchGrid<T>,
    pub answer: usize,
    pub retrieved: Vec<(TokenSequence, PatchGrid<T>)>,
}

impl<T> VqaSample<T> {
    pub fn retrieved_inputs(&self) -> Vec<PairInput<'_, T>> {
        self.retrieved
            .iter()
            .map(|(text, image)| PairInput { text, image })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinetuneObjective {
    /// One pass, plain cross-entropy.
    CrossEntropy,
    /// Two passes: mean cross-entropy plus `alpha` times the symmetric KL
    /// between their logits. `allow_without_dropout` accepts a zero dropout
    /// rate, in which case the KL term vanishes.
    RDrop { alpha: f64, allow_without_dropout: bool },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FinetuneLosses {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

/// Batch-mean loss and, with `grads = Some(..)`, the summed gradient.
pub fn finetune_loss_and_grad<T: Real>(
    model: &RammModel<T>,
    batch: &[VqaSample<T>],
    objective: FinetuneObjective,
    sc: StepCtx,
    exec: Exec,
    grads: Option<EncoderGrads>,
) -> Result<(FinetuneLosses, Option<RammModel<T>>)> {
    if batch.is_empty() {
        return Err(RammError::Contract("empty fine-tuning batch".into()));
    }
    if let FinetuneObjective::RDrop {
        allow_without_dropout: false,
        ..
    } = objective
    {
        if sc.dropout <= 0.0 {
            return Err(RammError::Contract(
                "R-Drop needs dropout; request the no-dropout form explicitly".into(),
            ));
        }
    }
    let inv_b = T::lit(1.0 / batch.len() as f64);
    let per = exec.try_map(batch, |i, s| -> Result<(T, T, Option<RammModel<T>>)> {
        let ret = s.retrieved_inputs();
        match objective {
            FinetuneObjective::CrossEntropy => {
                let f = model.vqa_forward(&s.question, &s.image, &ret, &sc.ctx(0, i))?;
                let (ce, d) = cross_entropy(&f.logits, &[s.answer])?;
                let g = match grads {
                    Some(eg) => {
                        let mut g = zeros_like(model);
                        model.vqa_backward(&f, &d.scale(inv_b), &mut g, eg)?;
                        Some(g)
                    }
                    None => None,
                };
                Ok((ce, T::zero(), g))
            }
            FinetuneObjective::RDrop { alpha, .. } => {
                let f0 = model.vqa_forward(&s.question, &s.image, &ret, &sc.ctx(0, i))?;
                let f1 = model.vqa_forward(&s.question, &s.image, &ret, &sc.ctx(1, i))?;
                let (ce0, d0) = cross_entropy(&f0.logits, &[s.answer])?;
                let (ce1, d1) = cross_entropy(&f1.logits, &[s.answer])?;
                let (kl, dp, dq) = symmetric_kl_with_grad(&f0.logits, &f1.logits)?;
                let half = T::lit(0.5);
                let a = T::lit(alpha);
                let g = match grads {
                    Some(eg) => {
                        let mut g = zeros_like(model);
                        let g0: Tensor<T> = d0.scale(half).add(&dp.scale(a))?.scale(inv_b);
                        let g1: Tensor<T> = d1.scale(half).add(&dq.scale(a))?.scale(inv_b);
                        model.vqa_backward(&f0, &g0, &mut g, eg)?;
                        model.vqa_backward(&f1, &g1, &mut g, eg)?;
                        Some(g)
                    }
                    None => None,
                };
                Ok(((ce0 + ce1) * half, kl * a, g))
            }
        }
    })?;
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut gs = Vec::new();
    for (c, k, g) in per {
        ce += c.to_f64_lossless();
        kl += k.to_f64_lossless();
        gs.extend(g);
    }
    let n = batch.len() as f64;
    let losses = FinetuneLosses {
        ce: ce / n,
        kl: kl / n,
        total: (ce + kl) / n,
    };
    let g = if gs.is_empty() { None } else { Some(sum_in_order(gs)?) };
    Ok((losses, g))
}
