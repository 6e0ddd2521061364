//! Accuracy reports, retrieval statistics and their text / JSON-lines forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::synth::{is_closed_answer, QuestionKind};
use crate::error::Result;
use crate::model::vocab::split_words;
use crate::store::SourceTag;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedInfo {
    pub pair_id: u64,
    pub s: f64,
    pub source_tag: SourceTag,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub question: String,
    pub gold: String,
    pub predicted: String,
    pub kind: QuestionKind,
    pub retrieved: Vec<RetrievedInfo>,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Subset {
    fn of<'a>(preds: impl Iterator<Item = &'a Prediction>) -> Self {
        let (mut correct, mut total) = (0, 0);
        for p in preds {
            total += 1;
            correct += p.correct() as usize;
        }
        Subset {
            correct,
            total,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r: usize,
    pub overall: Subset,
    /// Gold answer is yes or no.
    pub closed: Subset,
    pub open: Subset,
    pub retrieval_required: Subset,
    pub image_only: Subset,
}

impl EvalReport {
    pub fn from_predictions(r: usize, preds: &[Prediction]) -> Self {
        let closed = |p: &&Prediction| is_closed_answer(&p.gold);
        let needs = |p: &&Prediction| p.kind == QuestionKind::Finding;
        EvalReport {
            r,
            overall: Subset::of(preds.iter()),
            closed: Subset::of(preds.iter().filter(closed)),
            open: Subset::of(preds.iter().filter(|p| !closed(p))),
            retrieval_required: Subset::of(preds.iter().filter(needs)),
            image_only: Subset::of(preds.iter().filter(|p| !needs(p))),
        }
    }
}

/// Whole-token, case-insensitive occurrence of `answer` in `caption`.
pub fn contains_answer(caption: &str, answer: &str) -> bool {
    let hay = split_words(caption);
    let needle = split_words(answer);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub items: usize,
    pub retrieved: usize,
    /// Percentage of all retrieved pairs coming from each source.
    pub source_share: BTreeMap<SourceTag, f64>,
    /// Items where at least one retrieved caption contains the gold answer.
    pub containing: usize,
    pub containment: f64,
}

impl RetrievalStats {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let mut counts: BTreeMap<SourceTag, usize> = BTreeMap::new();
        let mut retrieved = 0;
        let mut containing = 0;
        for p in preds {
            for r in &p.retrieved {
                *counts.entry(r.source_tag).or_default() += 1;
                retrieved += 1;
            }
            containing += p.retrieved.iter().any(|r| contains_answer(&r.caption, &p.gold)) as usize;
        }
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        RetrievalStats {
            items: preds.len(),
            retrieved,
            source_share: counts.into_iter().map(|(t, n)| (t, pct(n, retrieved))).collect(),
            containing,
            containment: pct(containing, preds.len()),
        }
    }
}

/// `# key=value` lines identifying the run that produced a report.
pub fn header(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn cell(s: &Subset) -> String {
    format!("{:.4} ({}/{})", s.accuracy, s.correct, s.total)
}

pub fn render_eval_table(rows: &[EvalReport]) -> String {
    let mut out = String::from("r\toverall\tclosed\topen\tretrieval_required\timage_only\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.r,
            cell(&r.overall),
            cell(&r.closed),
            cell(&r.open),
            cell(&r.retrieval_required),
            cell(&r.image_only)
        );
    }
    out
}

pub fn render_stats(s: &RetrievalStats) -> String {
    let mut out = String::from("source\tshare_pct\n");
    for (t, v) in &s.source_share {
        let _ = writeln!(out, "{t}\t{v:.2}");
    }
    let _ = writeln!(out, "items\t{}", s.items);
    let _ = writeln!(out, "retrieved\t{}", s.retrieved);
    let _ = writeln!(out, "containing_answer_pct\t{:.2} ({}/{})", s.containment, s.containing, s.items);
    out
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
