//! Training objectives, optimizer and weight averaging.

pub mod config;
pub mod finetune;
pub mod losses;
pub mod optim;
pub mod pretrain;

pub use config::TrainConfig;
pub use finetune::{finetune_loss_and_grad, FinetuneLosses, FinetuneObjective, VqaSample};
pub use losses::{itc_loss, itc_loss_with_grad, itm_loss, mask_tokens, mlm_loss, momentum_targets, MaskedTokens};
pub use optim::{ema_decay_at, ema_update, AdamW, LinearDecay};
pub use pretrain::{plan_batch, pretrain_loss_and_grad, PretrainLosses, PretrainPair, PretrainPlan, StepCtx};

use crate::error::{RammError, Result};
use crate::model::params::{axpy_params, Params};
use crate::tensor::Real;

/// Sum per-sample gradients in index order.
pub fn sum_in_order<T: Real, P: Params<T>>(parts: Vec<P>) -> Result<P> {
    let mut it = parts.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| RammError::Contract("no gradients to sum".into()))?;
    for p in it {
        axpy_params(&mut acc, T::one(), &p)?;
    }
    Ok(acc)
}
