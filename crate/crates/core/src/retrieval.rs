//! Dual top-r search over an embedding index, max-merge of the two result
//! lists, and selection of the pairs handed to fusion.
//!
//! Scores are dot products between the unit query and stored unit vectors,
//! accumulated in f64. Every ordering is by score descending with ascending
//! pair id breaking ties, so results never depend on scan order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{RammError, Result};
use crate::exec::Exec;
use crate::model::{PatchGrid, RammModel};
use crate::store::EmbeddingIndex;
use crate::tensor::Tensor;

/// Added to every shifted score so the weakest pool member keeps a nonzero chance.
pub const SAMPLING_EPS: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-5;
const SCAN_CHUNK: usize = 2048;

static NORMALIZED_QUERIES: AtomicU64 = AtomicU64::new(0);

/// How many non-unit queries have been renormalized in this process.
pub fn normalized_query_count() -> u64 {
    NORMALIZED_QUERIES.load(AtomicOrdering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Corpus caption vectors; yields `s_w`.
    Text,
    /// Corpus image vectors; yields `s_v`.
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        })
    }
}

impl FromStr for Mode {
    type Err = RammError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Mode::Train),
            "infer" | "inference" => Ok(Mode::Infer),
            _ => Err(RammError::Config(format!("unknown retrieval mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub pair_id: u64,
    pub row: usize,
    pub s_w: Option<f64>,
    pub s_v: Option<f64>,
    pub s: f64,
}

impl Candidate {
    fn single(pair_id: u64, row: usize, family: Family, score: f64) -> Self {
        let (s_w, s_v) = match family {
            Family::Text => (Some(score), None),
            Family::Image => (None, Some(score)),
        };
        Candidate {
            pair_id,
            row,
            s_w,
            s_v,
            s: score,
        }
    }

    fn rescore(&mut self) {
        self.s = match (self.s_w, self.s_v) {
            (Some(a), Some(b)) => a.max(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => f64::NEG_INFINITY,
        };
    }
}

/// Score descending, then pair id ascending.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.s.total_cmp(&a.s).then(a.pair_id.cmp(&b.pair_id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopR {
    pub hits: Vec<Candidate>,
    /// `r` exceeded the number of searchable rows; every row was returned.
    pub truncated: bool,
    /// The query was not unit length and has been normalized.
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub mode: Mode,
    pub selected: Vec<Candidate>,
    pub pool_size: usize,
    /// The pool held fewer than `r` pairs; all of them were selected.
    pub short: bool,
}

impl RetrievalResult {
    pub fn empty(mode: Mode) -> Self {
        RetrievalResult {
            mode,
            selected: Vec::new(),
            pool_size: 0,
            short: false,
        }
    }
}

/// Heap entry ordered so that the worst hit sits on top.
struct Worst(Candidate);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

fn dot(q: &[f64], v: &[f32]) -> f64 {
    q.iter().zip(v).map(|(&a, &b)| a * b as f64).sum()
}

/// Unit-length f64 copy of the query, and whether it had to be normalized.
pub fn prepare_query(query: &[f32]) -> Result<(Vec<f64>, bool)> {
    let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(RammError::Contract(format!("query vector has norm {n}")));
    }
    if (n - 1.0).abs() <= UNIT_TOL {
        return Ok((q, false));
    }
    NORMALIZED_QUERIES.fetch_add(1, AtomicOrdering::Relaxed);
    log::warn!("retrieval query has norm {n:.6}; normalizing");
    Ok((q.into_iter().map(|x| x / n).collect(), true))
}

fn scan(q: &[f64], index: &EmbeddingIndex, family: Family, r: usize, rows: std::ops::Range<usize>, skip: &(dyn Fn(u64) -> bool + Sync)) -> Vec<Candidate> {
    let vecs = index.vectors(family == Family::Text);
    let d = index.d_proj();
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(r + 1);
    for row in rows {
        let id = index.pair_id(row);
        if skip(id) {
            continue;
        }
        let c = Candidate::single(id, row, family, dot(q, &vecs[row * d..(row + 1) * d]));
        if heap.len() < r {
            heap.push(Worst(c));
        } else if let Some(top) = heap.peek() {
            if rank_order(&c, &top.0) == Ordering::Less {
                heap.pop();
                heap.push(Worst(c));
            }
        }
    }
    heap.into_iter().map(|w| w.0).collect()
}

/// Exact top-r of the index against `query` in one vector family.
pub fn search_topr(query: &[f32], index: &EmbeddingIndex, family: Family, r: usize, exec: Exec) -> Result<TopR> {
    search_topr_filtered(query, index, family, r, exec, &|_| false)
}

/// [`search_topr`] ignoring every pair for which `skip` returns true.
pub fn search_topr_filtered(
    query: &[f32],
    index: &EmbeddingIndex,
    family: Family,
    r: usize,
    exec: Exec,
    skip: &(dyn Fn(u64) -> bool + Sync),
) -> Result<TopR> {
    if r == 0 {
        return Err(RammError::InvalidR(r));
    }
    if query.len() != index.d_proj() {
        return Err(RammError::Dimension {
            op: "search_topr",
            lhs: vec![query.len()],
            rhs: vec![index.d_proj()],
        });
    }
    let (q, normalized) = prepare_query(query)?;
    let n = index.len();
    let chunks = n.div_ceil(SCAN_CHUNK);
    let mut hits: Vec<Candidate> = exec
        .map_range(chunks, |c| scan(&q, index, family, r, c * SCAN_CHUNK..((c + 1) * SCAN_CHUNK).min(n), skip))
        .into_iter()
        .flatten()
        .collect();
    hits.sort_by(rank_order);
    let truncated = hits.len() < r;
    hits.truncate(r);
    Ok(TopR {
        hits,
        truncated,
        normalized,
    })
}

/// Union of the two result lists keyed by pair id; a pair found by both
/// searches keeps both components and scores their maximum. The pool is
/// returned in rank order.
pub fn merge_candidates(top_w: &[Candidate], top_v: &[Candidate]) -> Vec<Candidate> {
    let mut by_id: BTreeMap<u64, Candidate> = BTreeMap::new();
    for c in top_w.iter().chain(top_v) {
        by_id
            .entry(c.pair_id)
            .and_modify(|e| {
                e.s_w = e.s_w.or(c.s_w);
                e.s_v = e.s_v.or(c.s_v);
                e.rescore();
            })
            .or_insert(*c);
    }
    let mut pool: Vec<Candidate> = by_id.into_values().collect();
    pool.sort_by(rank_order);
    pool
}

/// Fill in whichever component a pool member is missing with its exact dot
/// product, then rescore and re-rank.
pub fn complete_scores(pool: &mut [Candidate], query: &[f32], index: &EmbeddingIndex) -> Result<()> {
    let (q, _) = prepare_query(query)?;
    for c in pool.iter_mut() {
        if c.s_w.is_none() {
            c.s_w = Some(dot(&q, index.text_vec(c.row)));
        }
        if c.s_v.is_none() {
            c.s_v = Some(dot(&q, index.image_vec(c.row)));
        }
        c.rescore();
    }
    pool.sort_by(rank_order);
    Ok(())
}

fn check_pool(pool: &[Candidate]) -> Result<()> {
    if pool.is_empty() {
        return Err(RammError::Contract("empty candidate pool".into()));
    }
    if let Some(c) = pool.iter().find(|c| !c.s.is_finite()) {
        return Err(RammError::NonFinite(format!("score of pair {}", c.pair_id)));
    }
    Ok(())
}

/// Draw `r` distinct pool members without replacement, each draw with
/// probability proportional to `s - min(pool s) + SAMPLING_EPS` among the
/// remaining members. The selection is returned in rank order.
pub fn select_training(pool: &[Candidate], r: usize, seed: u64) -> Result<RetrievalResult> {
    check_pool(pool)?;
    let short = pool.len() < r;
    let mut selected: Vec<Candidate> = if pool.len() <= r {
        pool.to_vec()
    } else {
        let lo = pool.iter().map(|c| c.s).fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample_weighted(&mut rng, pool.len(), |i| pool[i].s - lo + SAMPLING_EPS, r)
            .map_err(|e| RammError::Contract(format!("sampling weights: {e}")))?
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    selected.sort_by(rank_order);
    Ok(RetrievalResult {
        mode: Mode::Train,
        selected,
        pool_size: pool.len(),
        short,
    })
}

/// The `r` best pool members by score, ties by ascending pair id.
pub fn select_inference(pool: &[Candidate], r: usize) -> Result<RetrievalResult> {
    check_pool(pool)?;
    let mut selected = pool.to_vec();
    selected.sort_by(rank_order);
    selected.truncate(r);
    Ok(RetrievalResult {
        mode: Mode::Infer,
        selected,
        pool_size: pool.len(),
        short: pool.len() < r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrieveOptions {
    pub r: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Leave this pair out of both searches (ablation of self-retrieval).
    pub exclude: Option<u64>,
    pub exec: Exec,
}

/// Dual search, merge and score completion: the pool `select_*` draws from.
/// Empty when `r` is 0.
pub fn candidate_pool(query: &[f32], index: &EmbeddingIndex, r: usize, exclude: Option<u64>, exec: Exec) -> Result<Vec<Candidate>> {
    if r == 0 {
        return Ok(Vec::new());
    }
    let skip = move |id: u64| Some(id) == exclude;
    let top_w = search_topr_filtered(query, index, Family::Text, r, exec, &skip)?;
    let top_v = search_topr_filtered(query, index, Family::Image, r, exec, &skip)?;
    let mut pool = merge_candidates(&top_w.hits, &top_v.hits);
    complete_scores(&mut pool, query, index)?;
    Ok(pool)
}

/// Select from a precomputed pool according to `mode`.
pub fn select(pool: &[Candidate], r: usize, mode: Mode, seed: u64) -> Result<RetrievalResult> {
    if r == 0 {
        return Ok(RetrievalResult::empty(mode));
    }
    if pool.is_empty() {
        return Ok(RetrievalResult {
            short: true,
            ..RetrievalResult::empty(mode)
        });
    }
    match mode {
        Mode::Train => select_training(pool, r, seed),
        Mode::Infer => select_inference(pool, r),
    }
}

/// Dual search, merge, completion and selection for a projected image query.
pub fn retrieve_with_query(query: &[f32], index: &EmbeddingIndex, opts: &RetrieveOptions) -> Result<RetrievalResult> {
    let pool = candidate_pool(query, index, opts.r, opts.exclude, opts.exec)?;
    select(&pool, opts.r, opts.mode, opts.seed)
}

/// Encode the query image with the frozen image encoder and retrieve.
/// Only the image takes part in the query; questions never do.
pub fn retrieve(
    image: &PatchGrid<f32>,
    model: &RammModel<f32>,
    index: &EmbeddingIndex,
    opts: &RetrieveOptions,
) -> Result<RetrievalResult> {
    if opts.r == 0 {
        return Ok(RetrievalResult::empty(opts.mode));
    }
    let q = model.image_query(image)?;
    retrieve_with_query(q.data(), index, opts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedPair {
    pub pair_id: u64,
    pub s: f64,
    pub caption: String,
    pub image: Tensor<f32>,
}

/// Attach each selected pair's caption and image payload.
pub fn materialize(
    result: &RetrievalResult,
    index: &EmbeddingIndex,
    mut image_of: impl FnMut(u64) -> Result<Tensor<f32>>,
) -> Result<Vec<RetrievedPair>> {
    result
        .selected
        .iter()
        .map(|c| {
            let row = index.row_of(c.pair_id).ok_or(RammError::UnknownPairId(c.pair_id))?;
            Ok(RetrievedPair {
                pair_id: c.pair_id,
                s: c.s,
                caption: index.caption(row).to_string(),
                image: image_of(c.pair_id)?,
            })
        })
        .collect()
}
