//! Desk-scale experiment driver: synthetic data, pretraining, index
//! building, retrieval-augmented fine-tuning, evaluation and r-sweeps.
//!
//! Stages work on in-memory values; the `*_dir` helpers persist them so the
//! command-line tool can run each stage separately.

pub mod config;
pub mod report;
pub mod synth;
pub mod train;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use config::{ExperimentConfig, FinetuneConfig};
pub use report::{EvalReport, Prediction, RetrievalStats};
pub use synth::{gen_synthetic, SynthData, SyntheticSpec, VqaItem};
pub use train::{CorpusLookup, Finetuned, RetrievalSetup};

use crate::error::{RammError, Result};
use crate::exec::Exec;
use crate::kv::KvMap;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, RammModel, Vocab};
use crate::store::{build_store, fingerprint, load_index, EmbeddingIndex};
use synth::CorpusEntry;

pub const ANSWERS_FILE: &str = "answers.txt";
pub const FINETUNE_FILE: &str = "finetune.txt";
pub const RETRIEVER_DIR: &str = "retriever";

/// Pretrained encoders, their index, and the pieces fine-tuning reuses.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: RammModel<f32>,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub index: EmbeddingIndex,
    pub lookup: CorpusLookup,
}

impl Pretrained {
    pub fn setup(&self) -> RetrievalSetup<'_> {
        RetrievalSetup {
            retriever: &self.model,
            index: &self.index,
            lookup: &self.lookup,
        }
    }
}

/// Model configuration with the data-dependent sizes filled in.
pub fn model_config_for(cfg: &ExperimentConfig, vocab: &Vocab, answers: usize) -> Result<ModelConfig> {
    let c = ModelConfig {
        vocab_size: vocab.len(),
        patch_grid: cfg.synth.patch_grid,
        d_patch: cfg.synth.d_patch,
        n_answers: answers.max(1),
        ..cfg.model.clone()
    };
    c.validate()?;
    Ok(c)
}

pub fn build_index(model: &RammModel<f32>, config: &ModelConfig, vocab: &Vocab, corpus: &[CorpusEntry], exec: Exec) -> Result<EmbeddingIndex> {
    let items = train::store_items(corpus);
    let (index, report) = build_store(&items, model, vocab, config.max_text_len, config.patch_grid, exec)?;
    for (id, why) in &report.skipped {
        log::warn!("pair {id} left out of the index: {why}");
    }
    Ok(index)
}

/// Vocabulary, pretraining and index building on a synthetic dataset.
pub fn prepare(data: &SynthData, cfg: &ExperimentConfig, exec: Exec, log: &mut dyn Write) -> Result<Pretrained> {
    let vocab = Vocab::from_texts(data.texts());
    let config = model_config_for(cfg, &vocab, data.spec.answer_vocab().len())?;
    let (model, _) = train::pretrain(&data.corpus, &vocab, &config, &cfg.train, exec, log)?;
    let index = build_index(&model, &config, &vocab, &data.corpus, exec)?;
    let lookup = CorpusLookup::new(&data.corpus, &vocab, &config)?;
    Ok(Pretrained {
        model,
        config,
        vocab,
        index,
        lookup,
    })
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub finetuned: Finetuned,
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
    pub stats: RetrievalStats,
}

/// Fine-tune with `r` retrieved pairs and evaluate on the test split.
pub fn finetune_and_eval(
    p: &Pretrained,
    data: &SynthData,
    cfg: &ExperimentConfig,
    r: usize,
    exec: Exec,
    log: &mut dyn Write,
) -> Result<RunResult> {
    let fc = FinetuneConfig { r, ..cfg.finetune.clone() };
    let answers = train::answer_list(&data.spec.answer_vocab(), &data.train);
    let setup = p.setup();
    let ft = train::finetune(&p.model, &p.config, &p.vocab, &answers, &data.train, &setup, &cfg.train, &fc, exec, log)?;
    let predictions = train::predict(&ft.model, &ft.config, &p.vocab, &ft.answers, &data.test, &setup, r, exec)?;
    Ok(RunResult {
        report: EvalReport::from_predictions(r, &predictions),
        stats: RetrievalStats::from_predictions(&predictions),
        predictions,
        finetuned: ft,
    })
}

/// One fine-tune + eval per `r`, all on the same splits and pretrained model.
pub fn sweep_r(p: &Pretrained, data: &SynthData, cfg: &ExperimentConfig, rs: &[usize], exec: Exec, log: &mut dyn Write) -> Result<Vec<EvalReport>> {
    if let Some(&bad) = rs.iter().find(|&&r| r > p.config.max_retrieved) {
        return Err(RammError::InvalidR(bad));
    }
    rs.iter()
        .map(|&r| Ok(finetune_and_eval(p, data, cfg, r, exec, log)?.report))
        .collect()
}

/// Write a fine-tuned checkpoint: weights, config, vocab, answers, the
/// fine-tuning settings and a copy of the retriever the index was built with.
pub fn save_finetuned(dir: &Path, ft: &Finetuned, vocab: &Vocab, fc: &FinetuneConfig, retriever: &RammModel<f32>, retriever_config: &ModelConfig) -> Result<()> {
    save_checkpoint(dir, &ft.model, &ft.config, vocab)?;
    fs::write(dir.join(ANSWERS_FILE), ft.answers.join("\n") + "\n")?;
    fs::write(dir.join(FINETUNE_FILE), fc.to_kv().render())?;
    save_checkpoint(&dir.join(RETRIEVER_DIR), retriever, retriever_config, vocab)
}

#[derive(Clone, Debug)]
pub struct LoadedFinetuned {
    pub model: RammModel<f32>,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub answers: Vec<String>,
    pub finetune: FinetuneConfig,
    pub retriever: RammModel<f32>,
}

pub fn load_finetuned(dir: &Path) -> Result<LoadedFinetuned> {
    let (model, config, vocab) = load_checkpoint(dir)?;
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => RammError::MissingArtifact(p.clone()),
            _ => e.into(),
        })
    };
    let answers: Vec<String> = read(ANSWERS_FILE)?.lines().map(str::to_string).collect();
    let mut finetune = FinetuneConfig::default();
    finetune.update_from_kv(&KvMap::parse(&read(FINETUNE_FILE)?)?)?;
    let (retriever, _, _) = load_checkpoint(&dir.join(RETRIEVER_DIR))?;
    Ok(LoadedFinetuned {
        model,
        config,
        vocab,
        answers,
        finetune,
        retriever,
    })
}

/// Load an index and make sure it was built by `retriever`.
pub fn load_index_checked(path: &Path, retriever: &RammModel<f32>) -> Result<EmbeddingIndex> {
    let index = load_index(path)?;
    index.check_fingerprint(fingerprint(retriever))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::TrainConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth = SyntheticSpec {
            n_clusters: 4,
            pairs_per_cluster: 4,
            vqa_per_cluster: 6,
            heldout_clusters: 1,
            ..SyntheticSpec::default()
        };
        cfg.model.d = 16;
        cfg.model.d_ff = 32;
        cfg.model.d_proj = 8;
        cfg.train = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        cfg.finetune.epochs = 2;
        cfg.finetune.batch_size = 8;
        cfg
    }

    #[test]
    fn pipeline_runs_and_is_deterministic() {
        let cfg = tiny();
        let data = gen_synthetic(&cfg.synth).unwrap();
        let mut log = Vec::new();
        let p = prepare(&data, &cfg, Exec::Parallel, &mut log).unwrap();
        assert_eq!(p.index.len(), 16);
        let a = finetune_and_eval(&p, &data, &cfg, 2, Exec::Parallel, &mut log).unwrap();
        let b = finetune_and_eval(&p, &data, &cfg, 2, Exec::Sequential, &mut Vec::new()).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.finetuned.model, b.finetuned.model);
        assert!(a.predictions.iter().all(|q| q.retrieved.len() == 2));
        assert_eq!(a.stats.source_share.values().sum::<f64>(), 100.0);
        let text = String::from_utf8(log).unwrap();
        assert!(text.lines().any(|l| l.starts_with("pretrain\t0\t")));
        assert!(text.lines().any(|l| l.starts_with("finetune\t")));

        let rows = sweep_r(&p, &data, &cfg, &[0, 1], Exec::Parallel, &mut std::io::sink()).unwrap();
        assert_eq!(rows.iter().map(|r| r.r).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(rows[0].overall.total, rows[1].overall.total);
        assert_eq!(sweep_r(&p, &data, &cfg, &[9], Exec::Parallel, &mut std::io::sink()).unwrap_err().code(), "invalid-r");
    }

    #[test]
    fn finetuned_checkpoint_round_trip() {
        let cfg = tiny();
        let data = gen_synthetic(&cfg.synth).unwrap();
        let p = prepare(&data, &cfg, Exec::Parallel, &mut std::io::sink()).unwrap();
        let run = finetune_and_eval(&p, &data, &cfg, 1, Exec::Parallel, &mut std::io::sink()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fc = FinetuneConfig { r: 1, ..cfg.finetune.clone() };
        save_finetuned(dir.path(), &run.finetuned, &p.vocab, &fc, &p.model, &p.config).unwrap();
        let back = load_finetuned(dir.path()).unwrap();
        assert_eq!(back.model, run.finetuned.model);
        assert_eq!(back.answers, run.finetuned.answers);
        assert_eq!(back.finetune, fc);
        assert_eq!(fingerprint(&back.retriever), p.index.fingerprint());
    }
}
