use std::collections::HashSet;

use proptest::prelude::*;

use ramm_core::retrieval::{candidate_pool, merge_candidates, search_topr, select_inference, select_training, Family};
use ramm_core::store::{load_index, save_index, EmbeddingIndex, SourceTag};
use ramm_core::tensor::ops::{layer_norm, softmax_rows};
use ramm_core::tensor::{decode_tensor, encode_tensor, AnyTensor};
use ramm_core::{Exec, Tensor};

fn normalize(v: Vec<f32>) -> Option<Vec<f32>> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    (n > 1e-3).then(|| v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

fn unit(d: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, d).prop_filter_map("zero vector", normalize)
}

/// `(index, query)` with `n` rows of dimension `d`. Vectors are drawn from a
/// small palette half of the time so exact ties are common.
fn corpus(max_n: usize) -> impl Strategy<Value = (EmbeddingIndex, Vec<f32>)> {
    (1..=max_n, 2usize..8, any::<bool>()).prop_flat_map(|(n, d, tied)| {
        let rows = if tied { 3 } else { n };
        (
            prop::collection::vec((unit(d), unit(d)), rows),
            prop::collection::vec(any::<u64>(), n),
            prop::collection::vec(0..rows, n),
            unit(d),
        )
            .prop_map(move |(vecs, ids, pick, q)| {
                let mut idx = EmbeddingIndex::empty(d, 1);
                let mut seen = HashSet::new();
                for (k, id) in ids.into_iter().enumerate() {
                    if seen.insert(id) {
                        let (t, v) = &vecs[if tied { pick[k] } else { k }];
                        idx.push(id, SourceTag::Roco, "c", t, v).unwrap();
                    }
                }
                (idx, q)
            })
    })
}

fn scores(idx: &EmbeddingIndex, q: &[f32], text: bool) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = (0..idx.len())
        .map(|row| {
            let v = if text { idx.text_vec(row) } else { idx.image_vec(row) };
            (idx.pair_id(row), q.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum())
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) as f64).sin() * 1e3).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        match decode_tensor(&encode_tensor(&t)).unwrap() {
            AnyTensor::F64(b) => prop_assert_eq!(b, t.clone()),
            AnyTensor::F32(_) => prop_assert!(false, "precision changed"),
        }
        let t32: Tensor<f32> = t.cast();
        match decode_tensor(&encode_tensor(&t32)).unwrap() {
            AnyTensor::F32(b) => prop_assert_eq!(b, t32),
            AnyTensor::F64(_) => prop_assert!(false, "precision changed"),
        }
    }

    #[test]
    fn index_round_trip((idx, _) in corpus(40)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.bin");
        save_index(&idx, &path).unwrap();
        let back = load_index(&path).unwrap();
        prop_assert_eq!(back.encode(), idx.encode());
        prop_assert_eq!(back.pair_ids(), idx.pair_ids());
    }

    #[test]
    fn topr_is_the_sorted_prefix((idx, q) in corpus(60), r in 1usize..10) {
        for (family, text) in [(Family::Text, true), (Family::Image, false)] {
            let got = search_topr(&q, &idx, family, r, Exec::Sequential).unwrap();
            let want = scores(&idx, &q, text);
            let ids: Vec<u64> = got.hits.iter().map(|c| c.pair_id).collect();
            let want_ids: Vec<u64> = want.iter().take(r).map(|w| w.0).collect();
            prop_assert_eq!(ids, want_ids);
            prop_assert_eq!(got.hits.len(), r.min(idx.len()));
        }
    }

    #[test]
    fn pool_invariants((idx, q) in corpus(60), r in 1usize..6) {
        let pool = candidate_pool(&q, &idx, r, None, Exec::Parallel).unwrap();
        if idx.len() >= 2 * r {
            prop_assert!(pool.len() >= r && pool.len() <= 2 * r);
        }
        let ids: HashSet<u64> = pool.iter().map(|c| c.pair_id).collect();
        prop_assert_eq!(ids.len(), pool.len());
        for c in &pool {
            let (w, v) = (c.s_w.unwrap(), c.s_v.unwrap());
            prop_assert_eq!(c.s, w.max(v));
            prop_assert!(c.s.abs() <= 1.0 + 1e-5);
        }
        prop_assert_eq!(pool, candidate_pool(&q, &idx, r, None, Exec::Sequential).unwrap());
    }

    #[test]
    fn merge_keeps_every_candidate_once((idx, q) in corpus(40), r in 1usize..6) {
        let a = search_topr(&q, &idx, Family::Text, r, Exec::Sequential).unwrap().hits;
        let b = search_topr(&q, &idx, Family::Image, r, Exec::Sequential).unwrap().hits;
        let merged = merge_candidates(&a, &b);
        let union: HashSet<u64> = a.iter().chain(&b).map(|c| c.pair_id).collect();
        prop_assert_eq!(merged.len(), union.len());
        for m in &merged {
            let from_a = a.iter().find(|c| c.pair_id == m.pair_id).map(|c| c.s);
            let from_b = b.iter().find(|c| c.pair_id == m.pair_id).map(|c| c.s);
            prop_assert_eq!(m.s_w, from_a);
            prop_assert_eq!(m.s_v, from_b);
        }
    }

    #[test]
    fn selections_are_distinct_pool_members((idx, q) in corpus(60), r in 1usize..6, seed in any::<u64>()) {
        let pool = candidate_pool(&q, &idx, r, None, Exec::Sequential).unwrap();
        let ids: HashSet<u64> = pool.iter().map(|c| c.pair_id).collect();
        for sel in [select_training(&pool, r, seed).unwrap(), select_inference(&pool, r).unwrap()] {
            prop_assert_eq!(sel.selected.len(), r.min(pool.len()));
            let picked: HashSet<u64> = sel.selected.iter().map(|c| c.pair_id).collect();
            prop_assert_eq!(picked.len(), sel.selected.len());
            prop_assert!(picked.is_subset(&ids));
            prop_assert!(sel.selected.windows(2).all(|w| w[0].s >= w[1].s));
        }
        prop_assert_eq!(select_training(&pool, r, seed).unwrap(), select_training(&pool, r, seed).unwrap());
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let y = softmax_rows(&Tensor::matrix(3, 4, data).unwrap());
        for i in 0..3 {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardizes(data in prop::collection::vec(-10.0f64..10.0, 8)) {
        let x = Tensor::matrix(2, 4, data).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        for i in 0..2 {
            prop_assert!(y.row(i).iter().sum::<f64>().abs() < 1e-9);
            let var = y.row(i).iter().map(|v| v * v).sum::<f64>() / 4.0;
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }
}
