use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ramm_core::corpus::{harvest, FilterConfig, HarvestConfig, PatternSet};
use ramm_core::harness::report::{self, header, render_eval_table, render_stats, to_jsonl, Prediction};
use ramm_core::harness::synth::{load_corpus, load_vqa, write_synthetic, CorpusEntry, VqaItem};
use ramm_core::harness::train::{answer_list, finetune, predict, pretrain, CorpusLookup, RetrievalSetup};
use ramm_core::harness::{
    build_index, gen_synthetic, load_finetuned, load_index_checked, model_config_for, save_finetuned, EvalReport,
    ExperimentConfig, FinetuneConfig, RetrievalStats,
};
use ramm_core::model::{load_checkpoint, save_checkpoint, ModelConfig, PatchGrid, RammModel, Vocab};
use ramm_core::retrieval::{retrieve_with_query, Mode, RetrieveOptions};
use ramm_core::store::{fingerprint, load_index, save_index};
use ramm_core::tensor::read_tensor;
use ramm_core::{Exec, RammError, Result};

#[derive(Parser)]
#[command(name = "ramm", version, about = "Retrieval-augmented medical VQA experiments at desk scale")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set finetune.r=2.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clustered corpus and VQA splits.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build an image-caption corpus from case-report articles.
    Harvest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Heading patterns, one regular expression per line.
        #[arg(long)]
        patterns: Option<PathBuf>,
        #[arg(long)]
        min_chars: Option<usize>,
    },
    /// Pretrain the encoders with ITC, ITM and MLM on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// VQA files whose questions and answers join the vocabulary.
        #[arg(long)]
        vqa: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Encode a corpus with a checkpoint's frozen encoders into an index file.
    BuildIndex {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint on VQA with retrieved pairs.
    Finetune {
        #[command(flatten)]
        data: TaskArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a fine-tuned checkpoint; writes accuracy and retrieval reports.
    Eval {
        #[command(flatten)]
        data: TaskArgs,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the r the checkpoint was fine-tuned with.
        #[arg(long)]
        r: Option<usize>,
    },
    /// Retrieve pairs for one query tensor (a d_proj vector, or an image with --checkpoint).
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query_tensor: PathBuf,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value = "infer")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Leave this pair id out of the search.
        #[arg(long)]
        exclude: Option<u64>,
    },
    /// Retrieval source shares and answer containment of an eval run.
    Stats {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune and evaluate once per r on identical splits.
    SweepR {
        #[command(flatten)]
        data: TaskArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
        rs: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TaskArgs {
    /// Pretrained checkpoint (finetune, sweep-r) or fine-tuned checkpoint (eval).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

struct Env {
    cfg: ExperimentConfig,
    exec: Exec,
}

fn text_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, body)?;
    Ok(())
}

fn log_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn run_header(env: &Env, extra: &[(&str, String)]) -> String {
    let mut pairs = vec![
        ("config", env.cfg.fingerprint()),
        ("train.seed", env.cfg.train.seed.to_string()),
        ("finetune.seed", env.cfg.finetune.seed.to_string()),
    ];
    pairs.extend(extra.iter().cloned());
    header(&pairs)
}

struct Task {
    pretrained: RammModel<f32>,
    config: ModelConfig,
    vocab: Vocab,
    corpus: Vec<CorpusEntry>,
    index: ramm_core::store::EmbeddingIndex,
}

fn load_task(a: &TaskArgs) -> Result<Task> {
    let (pretrained, config, vocab) = load_checkpoint(&a.checkpoint)?;
    let index = load_index_checked(&a.index, &pretrained)?;
    let corpus = load_corpus(&a.corpus)?;
    Ok(Task {
        pretrained,
        config,
        vocab,
        corpus,
        index,
    })
}

fn eval_outputs(out: &Path, head: &str, reports: &[EvalReport], preds: Option<&[Prediction]>) -> Result<()> {
    text_file(&out.join("report.txt"), &format!("{head}{}", render_eval_table(reports)))?;
    text_file(&out.join("report.jsonl"), &to_jsonl(reports)?)?;
    if let Some(p) = preds {
        text_file(&out.join("predictions.jsonl"), &to_jsonl(p)?)?;
        let stats = RetrievalStats::from_predictions(p);
        text_file(&out.join("stats.txt"), &format!("{head}{}", render_stats(&stats)))?;
        text_file(&out.join("stats.jsonl"), &to_jsonl(&[stats])?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut env = Env {
        cfg: ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?,
        exec: if cli.sequential { Exec::Sequential } else { Exec::default() },
    };
    match cli.cmd {
        Cmd::GenSynth { out, seed } => {
            if let Some(s) = seed {
                env.cfg.synth.seed = s;
            }
            let data = gen_synthetic(&env.cfg.synth)?;
            write_synthetic(&out, &data)?;
            println!(
                "wrote {} corpus pairs, {} train and {} test questions to {}",
                data.corpus.len(),
                data.train.len(),
                data.test.len(),
                out.display()
            );
        }
        Cmd::Harvest {
            input,
            out,
            patterns,
            min_chars,
        } => {
            let mut cfg = HarvestConfig {
                exec: env.exec,
                ..HarvestConfig::default()
            };
            if let Some(p) = patterns {
                cfg.patterns = PatternSet::from_file(&p)?;
            }
            if let Some(n) = min_chars {
                cfg.filter = FilterConfig {
                    min_chars: n,
                    ..cfg.filter
                };
            }
            let summary = harvest(&input, &out, &cfg)?;
            print!("{}", summary.render());
        }
        Cmd::Pretrain {
            corpus,
            vqa,
            out,
            seed,
            epochs,
        } => {
            if let Some(s) = seed {
                env.cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                env.cfg.train.epochs = e;
            }
            let entries = load_corpus(&corpus)?;
            let mut texts: Vec<String> = entries.iter().map(|c| c.pair.caption.clone()).collect();
            let mut answers = 0;
            for f in &vqa {
                let items = load_vqa(f)?;
                answers = answers.max(answer_list(&[], &items).len());
                texts.extend(items.iter().flat_map(|q| [q.question.clone(), q.answer.clone()]));
            }
            let vocab = Vocab::from_texts(&texts);
            let config = model_config_for(&env.cfg, &vocab, answers.max(2))?;
            let mut log = log_file(&out, "train_log.tsv")?;
            let (model, rows) = pretrain(&entries, &vocab, &config, &env.cfg.train, env.exec, &mut log)?;
            log.flush()?;
            save_checkpoint(&out, &model, &config, &vocab)?;
            text_file(&out.join("experiment.txt"), &env.cfg.to_kv().render())?;
            let last = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("pretrained {} steps, final loss {last:.4}; checkpoint in {}", rows.len(), out.display());
        }
        Cmd::BuildIndex { checkpoint, corpus, out } => {
            let (model, config, vocab) = load_checkpoint(&checkpoint)?;
            let entries = load_corpus(&corpus)?;
            let index = build_index(&model, &config, &vocab, &entries, env.exec)?;
            save_index(&index, &out)?;
            println!(
                "indexed {} of {} pairs (fingerprint {:016x}) into {}",
                index.len(),
                entries.len(),
                index.fingerprint(),
                out.display()
            );
        }
        Cmd::Finetune {
            data,
            train,
            out,
            r,
            seed,
            epochs,
        } => {
            let fc = FinetuneConfig {
                r: r.unwrap_or(env.cfg.finetune.r),
                seed: seed.unwrap_or(env.cfg.finetune.seed),
                epochs: epochs.unwrap_or(env.cfg.finetune.epochs),
                ..env.cfg.finetune.clone()
            };
            let task = load_task(&data)?;
            fc.validate(task.config.max_retrieved)?;
            let items = load_vqa(&train)?;
            let lookup = CorpusLookup::new(&task.corpus, &task.vocab, &task.config)?;
            let setup = RetrievalSetup {
                retriever: &task.pretrained,
                index: &task.index,
                lookup: &lookup,
            };
            let answers = answer_list(&[], &items);
            let mut log = log_file(&out, "train_log.tsv")?;
            let ft = finetune(
                &task.pretrained,
                &task.config,
                &task.vocab,
                &answers,
                &items,
                &setup,
                &env.cfg.train,
                &fc,
                env.exec,
                &mut log,
            )?;
            log.flush()?;
            save_finetuned(&out, &ft, &task.vocab, &fc, &task.pretrained, &task.config)?;
            info!("fine-tuning log in {}", out.join("train_log.tsv").display());
            println!("fine-tuned with r={} for {} steps; checkpoint in {}", fc.r, ft.log.len(), out.display());
        }
        Cmd::Eval { data, test, out, r } => {
            let ft = load_finetuned(&data.checkpoint)?;
            let index = load_index_checked(&data.index, &ft.retriever)?;
            let corpus = load_corpus(&data.corpus)?;
            let lookup = CorpusLookup::new(&corpus, &ft.vocab, &ft.config)?;
            let setup = RetrievalSetup {
                retriever: &ft.retriever,
                index: &index,
                lookup: &lookup,
            };
            let r = r.unwrap_or(ft.finetune.r);
            let items = load_vqa(&test)?;
            let preds = predict(&ft.model, &ft.config, &ft.vocab, &ft.answers, &items, &setup, r, env.exec)?;
            let rep = EvalReport::from_predictions(r, &preds);
            let head = run_header(&env, &[("checkpoint", data.checkpoint.display().to_string())]);
            eval_outputs(&out, &head, std::slice::from_ref(&rep), Some(&preds))?;
            print!("{}", render_eval_table(&[rep]));
        }
        Cmd::Retrieve {
            index,
            query_tensor,
            r,
            mode,
            seed,
            checkpoint,
            exclude,
        } => {
            if r == 0 {
                return Err(RammError::InvalidR(0));
            }
            let mode: Mode = mode.parse()?;
            let t = read_tensor(&query_tensor)?.into_precision::<f32>();
            let index = load_index(&index)?;
            let query = if t.rank() == 1 {
                t
            } else {
                let ckpt = checkpoint
                    .ok_or_else(|| RammError::Config("an image query needs --checkpoint to encode it".into()))?;
                let dir = if ckpt.join(ramm_core::harness::RETRIEVER_DIR).is_dir() {
                    ckpt.join(ramm_core::harness::RETRIEVER_DIR)
                } else {
                    ckpt
                };
                let (model, config, _) = load_checkpoint(&dir)?;
                index.check_fingerprint(fingerprint(&model))?;
                model.image_query(&PatchGrid::new(t, config.patch_grid)?)?
            };
            let opts = RetrieveOptions {
                r,
                mode,
                seed,
                exclude,
                exec: env.exec,
            };
            let res = retrieve_with_query(query.data(), &index, &opts)?;
            if res.short {
                log::warn!("pool held only {} pairs for r={r}", res.pool_size);
            }
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for (rank, c) in res.selected.iter().enumerate() {
                let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{:.6}\t{}",
                    rank + 1,
                    c.pair_id,
                    opt(c.s_w),
                    opt(c.s_v),
                    c.s,
                    index.caption(c.row)
                )?;
            }
        }
        Cmd::Stats { predictions, out } => {
            let text = fs::read_to_string(&predictions).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => RammError::MissingArtifact(predictions.clone()),
                _ => e.into(),
            })?;
            let preds: Vec<Prediction> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(RammError::from))
                .collect::<Result<_>>()?;
            let stats = report::RetrievalStats::from_predictions(&preds);
            let body = render_stats(&stats);
            if let Some(dir) = out {
                text_file(&dir.join("stats.txt"), &body)?;
                text_file(&dir.join("stats.jsonl"), &to_jsonl(&[stats])?)?;
            }
            print!("{body}");
        }
        Cmd::SweepR {
            data,
            train,
            test,
            rs,
            out,
        } => {
            let task = load_task(&data)?;
            if let Some(&bad) = rs.iter().find(|&&r| r > task.config.max_retrieved) {
                return Err(RammError::InvalidR(bad));
            }
            let train_items: Vec<VqaItem> = load_vqa(&train)?;
            let test_items = load_vqa(&test)?;
            let lookup = CorpusLookup::new(&task.corpus, &task.vocab, &task.config)?;
            let setup = RetrievalSetup {
                retriever: &task.pretrained,
                index: &task.index,
                lookup: &lookup,
            };
            let answers = answer_list(&[], &train_items);
            let mut log = log_file(&out, "train_log.tsv")?;
            let mut rows = Vec::new();
            for &r in &rs {
                let fc = FinetuneConfig {
                    r,
                    ..env.cfg.finetune.clone()
                };
                let ft = finetune(
                    &task.pretrained,
                    &task.config,
                    &task.vocab,
                    &answers,
                    &train_items,
                    &setup,
                    &env.cfg.train,
                    &fc,
                    env.exec,
                    &mut log,
                )?;
                let preds = predict(&ft.model, &ft.config, &task.vocab, &ft.answers, &test_items, &setup, r, env.exec)?;
                let rep = EvalReport::from_predictions(r, &preds);
                info!("r={r}: overall {:.4}", rep.overall.accuracy);
                rows.push(rep);
            }
            log.flush()?;
            let head = run_header(&env, &[("rs", rs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","))]);
            text_file(&out.join("sweep.txt"), &format!("{head}{}", render_eval_table(&rows)))?;
            text_file(&out.join("sweep.jsonl"), &to_jsonl(&rows)?)?;
            print!("{}", render_eval_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
