//! Pretraining, retrieval-augmented fine-tuning and prediction loops.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::FinetuneConfig;
use super::report::{Prediction, RetrievedInfo};
use super::synth::{CorpusEntry, VqaItem};
use crate::error::{RammError, Result};
use crate::exec::Exec;
use crate::model::layers::seed_of;
use crate::model::{Ctx, Init, ModelConfig, PatchGrid, RammModel, TokenSequence, VqaHead, Vocab};
use crate::objectives::{
    ema_decay_at, ema_update, finetune_loss_and_grad, plan_batch, pretrain_loss_and_grad, AdamW, FinetuneObjective,
    LinearDecay, PretrainPair, StepCtx, TrainConfig, VqaSample,
};
use crate::retrieval::{candidate_pool, select, Candidate, Mode};
use crate::store::{EmbeddingIndex, StoreItem};
use crate::tensor::Tensor;

const TAG_SHUFFLE: u64 = 0x5f1;
const TAG_SELECT: u64 = 0x5e1;
const TAG_VQA_INIT: u64 = 0x7a1;

fn write_line(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}")?;
    Ok(())
}

fn batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub fn grid(image: &Tensor<f32>, cfg: &ModelConfig) -> Result<PatchGrid<f32>> {
    PatchGrid::new(image.clone(), cfg.patch_grid)
}

pub fn store_items(corpus: &[CorpusEntry]) -> Vec<StoreItem> {
    corpus
        .iter()
        .map(|c| StoreItem {
            pair_id: c.pair.pair_id,
            source_tag: c.pair.source_tag,
            caption: c.pair.caption.clone(),
            image: Ok(c.image.clone()),
        })
        .collect()
}

/// Tokenized corpus pairs keyed by pair id, for materializing retrievals.
#[derive(Clone, Debug)]
pub struct CorpusLookup {
    pairs: HashMap<u64, (TokenSequence, PatchGrid<f32>)>,
}

impl CorpusLookup {
    pub fn new(corpus: &[CorpusEntry], vocab: &Vocab, cfg: &ModelConfig) -> Result<Self> {
        let mut pairs = HashMap::with_capacity(corpus.len());
        for c in corpus {
            let v = (vocab.tokenize(&c.pair.caption, cfg.max_text_len), grid(&c.image, cfg)?);
            if pairs.insert(c.pair.pair_id, v).is_some() {
                return Err(RammError::DuplicatePairId(c.pair.pair_id));
            }
        }
        Ok(CorpusLookup { pairs })
    }

    pub fn get(&self, id: u64) -> Result<&(TokenSequence, PatchGrid<f32>)> {
        self.pairs.get(&id).ok_or(RammError::UnknownPairId(id))
    }
}

/// The frozen retriever and what it searches.
#[derive(Clone, Copy)]
pub struct RetrievalSetup<'a> {
    pub retriever: &'a RammModel<f32>,
    pub index: &'a EmbeddingIndex,
    pub lookup: &'a CorpusLookup,
}

impl RetrievalSetup<'_> {
    /// Candidate pool of every image; empty pools when `r` is 0.
    pub fn pools(&self, images: &[PatchGrid<f32>], r: usize, exec: Exec) -> Result<Vec<Vec<Candidate>>> {
        if r == 0 {
            return Ok(vec![Vec::new(); images.len()]);
        }
        exec.try_map(images, |_, g| {
            let q = self.retriever.image_query(g)?;
            candidate_pool(q.data(), self.index, r, None, Exec::Sequential)
        })
    }

    fn materialize(&self, chosen: &[Candidate]) -> Result<Vec<(TokenSequence, PatchGrid<f32>)>> {
        chosen.iter().map(|c| self.lookup.get(c.pair_id).cloned()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub total: f64,
}

/// ITC + ITM + MLM pretraining with a momentum model for soft ITC targets.
pub fn pretrain(
    corpus: &[CorpusEntry],
    vocab: &Vocab,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    exec: Exec,
    log: &mut dyn Write,
) -> Result<(RammModel<f32>, Vec<LogRow>)> {
    tc.validate()?;
    let pairs: Vec<PretrainPair<f32>> = corpus
        .iter()
        .map(|c| {
            Ok(PretrainPair {
                text: vocab.tokenize(&c.pair.caption, cfg.max_text_len),
                image: grid(&c.image, cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut model: RammModel<f32> = RammModel::new(cfg, tc.seed)?;
    let mut momentum = model.clone();
    let mut opt = AdamW::new(&model, tc.weight_decay);
    let per_epoch = pairs.len() / tc.batch_size.max(2) + usize::from(pairs.len() % tc.batch_size.max(2) >= 2);
    let schedule = LinearDecay {
        base: tc.lr,
        total_steps: (per_epoch * tc.epochs) as u64,
    };
    write_line(log, "stage\tstep\tepoch\tlr\titc\titm\tmlm\ttotal")?;
    let mut rows = Vec::new();
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        for idx in batches(pairs.len(), tc.batch_size.max(2), seed_of(&[tc.seed, epoch as u64, TAG_SHUFFLE])) {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<PretrainPair<f32>> = idx.iter().map(|&i| pairs[i].clone()).collect();
            let plan = plan_batch(&batch, tc, cfg.vocab_size, step)?;
            let sc = StepCtx {
                dropout: cfg.dropout_rate,
                seed: tc.seed,
                step,
            };
            let (losses, grads) = pretrain_loss_and_grad(&model, Some(&momentum), &batch, &plan, tc, sc, exec)?;
            let lr = schedule.lr(step);
            opt.step(&mut model, &grads, lr)?;
            ema_update(&mut momentum, &model, tc.momentum)?;
            let row = LogRow {
                step,
                epoch,
                lr,
                a: losses.itc,
                b: losses.itm,
                c: losses.mlm,
                total: losses.total(),
            };
            write_line(
                log,
                &format!("pretrain\t{step}\t{epoch}\t{lr:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", row.a, row.b, row.c, row.total),
            )?;
            rows.push(row);
            step += 1;
        }
    }
    Ok((model, rows))
}

/// Answer list of a task: `extra` first, then any new training answers in order.
pub fn answer_list(extra: &[String], items: &[VqaItem]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for a in extra.iter().chain(items.iter().map(|q| &q.answer)) {
        if !out.contains(a) {
            out.push(a.clone());
        }
    }
    out
}

struct Prepared {
    question: TokenSequence,
    image: PatchGrid<f32>,
    answer: usize,
}

fn prepare_items(items: &[VqaItem], vocab: &Vocab, cfg: &ModelConfig, answers: &[String]) -> Result<Vec<Prepared>> {
    items
        .iter()
        .map(|q| {
            let answer = answers
                .iter()
                .position(|a| a == &q.answer)
                .ok_or_else(|| RammError::Config(format!("answer `{}` of {} is not in the answer list", q.answer, q.id)))?;
            Ok(Prepared {
                question: vocab.tokenize(&q.question, cfg.max_text_len),
                image: grid(&q.image, cfg)?,
                answer,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: RammModel<f32>,
    pub config: ModelConfig,
    pub answers: Vec<String>,
    pub log: Vec<LogRow>,
}

/// Fine-tune a pretrained model on VQA items with `fc.r` retrieved pairs
/// per sample. The VQA head is freshly initialized for `answers`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    pretrained: &RammModel<f32>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    answers: &[String],
    train: &[VqaItem],
    setup: &RetrievalSetup<'_>,
    tc: &TrainConfig,
    fc: &FinetuneConfig,
    exec: Exec,
    log: &mut dyn Write,
) -> Result<Finetuned> {
    fc.validate(cfg.max_retrieved)?;
    let config = ModelConfig {
        n_answers: answers.len(),
        ..cfg.clone()
    };
    config.validate()?;
    let mut model = pretrained.clone();
    model.vqa = VqaHead::new(&mut Init::new(seed_of(&[fc.seed, TAG_VQA_INIT])), config.d, answers.len());
    let items = prepare_items(train, vocab, &config, answers)?;
    let images: Vec<PatchGrid<f32>> = items.iter().map(|p| p.image.clone()).collect();
    let pools = setup.pools(&images, fc.r, exec)?;

    let objective = if fc.rdrop && config.dropout_rate > 0.0 {
        FinetuneObjective::RDrop {
            alpha: tc.rdrop_alpha,
            allow_without_dropout: false,
        }
    } else {
        FinetuneObjective::CrossEntropy
    };
    let mut opt = AdamW::new(&model, tc.weight_decay);
    let mut average = model.clone();
    let schedule = LinearDecay {
        base: fc.lr,
        total_steps: (items.len().div_ceil(fc.batch_size) * fc.epochs) as u64,
    };
    write_line(log, "stage\tstep\tepoch\tlr\tce\tkl\tunused\ttotal")?;
    let mut rows = Vec::new();
    let mut step = 0u64;
    for epoch in 0..fc.epochs {
        for idx in batches(items.len(), fc.batch_size, seed_of(&[fc.seed, epoch as u64, TAG_SHUFFLE])) {
            let batch = idx
                .iter()
                .map(|&i| {
                    let chosen = select(&pools[i], fc.r, Mode::Train, seed_of(&[fc.seed, epoch as u64, i as u64, TAG_SELECT]))?;
                    Ok(VqaSample {
                        question: items[i].question.clone(),
                        image: items[i].image.clone(),
                        answer: items[i].answer,
                        retrieved: setup.materialize(&chosen.selected)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let sc = StepCtx {
                dropout: config.dropout_rate,
                seed: fc.seed,
                step,
            };
            let (losses, grads) = finetune_loss_and_grad(&model, &batch, objective, sc, exec, Some(fc.encoder_grads))?;
            let grads = grads.ok_or_else(|| RammError::Contract("no gradient returned".into()))?;
            let lr = schedule.lr(step);
            opt.step(&mut model, &grads, lr)?;
            ema_update(&mut average, &model, ema_decay_at(tc.ema_decay, step))?;
            let row = LogRow {
                step,
                epoch,
                lr,
                a: losses.ce,
                b: losses.kl,
                c: 0.0,
                total: losses.total,
            };
            write_line(log, &format!("finetune\t{step}\t{epoch}\t{lr:.6e}\t{:.6}\t{:.6}\t0\t{:.6}", row.a, row.b, row.total))?;
            rows.push(row);
            step += 1;
        }
    }
    Ok(Finetuned {
        model: if fc.ema { average } else { model },
        config,
        answers: answers.to_vec(),
        log: rows,
    })
}

/// Answer every item with top-`r` retrieval; order-stable across policies.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    model: &RammModel<f32>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    answers: &[String],
    items: &[VqaItem],
    setup: &RetrievalSetup<'_>,
    r: usize,
    exec: Exec,
) -> Result<Vec<Prediction>> {
    if r > cfg.max_retrieved {
        return Err(RammError::InvalidR(r));
    }
    let images: Vec<PatchGrid<f32>> = items.iter().map(|q| grid(&q.image, cfg)).collect::<Result<_>>()?;
    let pools = setup.pools(&images, r, exec)?;
    let ctx = Ctx::inference();
    exec.try_map(items, |i, q| {
        let chosen = select(&pools[i], r, Mode::Infer, 0)?;
        let retrieved = setup.materialize(&chosen.selected)?;
        let inputs: Vec<_> = retrieved
            .iter()
            .map(|(text, image)| crate::model::PairInput { text, image })
            .collect();
        let question = vocab.tokenize(&q.question, cfg.max_text_len);
        let f = model.vqa_forward(&question, &images[i], &inputs, &ctx)?;
        let logits = f.logits.data();
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let info = chosen
            .selected
            .iter()
            .map(|c| RetrievedInfo {
                pair_id: c.pair_id,
                s: c.s,
                source_tag: setup.index.source_tag(c.row),
                caption: setup.index.caption(c.row).to_string(),
            })
            .collect();
        Ok(Prediction {
            id: q.id.clone(),
            question: q.question.clone(),
            gold: q.answer.clone(),
            predicted: answers.get(best).cloned().unwrap_or_default(),
            kind: q.kind,
            retrieved: info,
        })
    })
}
