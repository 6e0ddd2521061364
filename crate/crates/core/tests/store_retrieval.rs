use ramm_core::model::{Init, ModelConfig, PatchGrid, RammModel, Vocab};
use ramm_core::retrieval::{materialize, retrieve, Mode, RetrieveOptions};
use ramm_core::store::{build_store, load_index_for, save_index, StoreItem, SourceTag};
use ramm_core::{Exec, RammError, Tensor};

fn setup() -> (ModelConfig, Vocab, Vec<StoreItem>) {
    let vocab = Vocab::from_texts(["ct site0 shows nodule", "mri site1 shows mass", "xray site2 shows effusion"]);
    let c = ModelConfig {
        d_proj: 6,
        ..ModelConfig::micro(vocab.len())
    };
    let img = |seed| Init::new(seed).normal(&[c.n_patches(), c.d_patch], 1.0);
    let mut items: Vec<StoreItem> = (0..12u64)
        .map(|k| StoreItem {
            pair_id: 1000 + k,
            source_tag: if k % 2 == 0 { SourceTag::Pmcpm } else { SourceTag::Roco },
            caption: ["ct site0 shows nodule", "mri site1 shows mass", "xray site2 shows effusion"][k as usize % 3].into(),
            image: Ok(img(k)),
        })
        .collect();
    items.push(StoreItem {
        pair_id: 7,
        source_tag: SourceTag::Other,
        caption: "unreadable".into(),
        image: Err("bad payload".into()),
    });
    items.push(StoreItem {
        pair_id: 8,
        source_tag: SourceTag::Other,
        caption: "wrong geometry".into(),
        image: Ok(Tensor::zeros(&[3, 3])),
    });
    (c, vocab, items)
}

#[test]
fn store_build_save_and_fingerprint_check() {
    let (c, vocab, items) = setup();
    let model: RammModel<f32> = RammModel::new(&c, 1).unwrap();
    let (idx, report) = build_store(&items, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Parallel).unwrap();
    assert_eq!(report.encoded, 12);
    assert_eq!(report.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), vec![7, 8]);
    assert_eq!(idx.len(), 12);
    assert_eq!(idx.d_proj(), 6);
    let (seq, _) = build_store(&items, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Sequential).unwrap();
    assert_eq!(seq, idx);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.bin");
    save_index(&idx, &path).unwrap();
    let back = load_index_for(&path, &model).unwrap();
    assert_eq!(back, idx);
    assert_eq!(back.caption(1), "mri site1 shows mass");

    let other: RammModel<f32> = RammModel::new(&c, 2).unwrap();
    let err = load_index_for(&path, &other).unwrap_err();
    assert!(matches!(err, RammError::FingerprintMismatch { .. }));
    assert_eq!(err.exit_code(), 4);

    let mut dup = items.clone();
    dup[1].pair_id = dup[0].pair_id;
    assert!(matches!(
        build_store(&dup, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Sequential),
        Err(RammError::DuplicatePairId(1000))
    ));
}

#[test]
fn retrieve_end_to_end() {
    let (c, vocab, items) = setup();
    let model: RammModel<f32> = RammModel::new(&c, 3).unwrap();
    let (idx, _) = build_store(&items, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Parallel).unwrap();
    let query = PatchGrid::new(items[4].image.clone().unwrap(), c.patch_grid).unwrap();
    let mut opts = RetrieveOptions {
        r: 3,
        mode: Mode::Infer,
        seed: 0,
        exclude: None,
        exec: Exec::Parallel,
    };
    let res = retrieve(&query, &model, &idx, &opts).unwrap();
    assert_eq!(res.selected.len(), 3);
    assert!(res.pool_size >= 3 && res.pool_size <= 6);
    // The query image itself is in the corpus, so its own pair scores 1 on the image side.
    assert_eq!(res.selected[0].pair_id, 1004);
    assert!((res.selected[0].s_v.unwrap() - 1.0).abs() < 1e-5);

    opts.exclude = Some(1004);
    let res = retrieve(&query, &model, &idx, &opts).unwrap();
    assert!(res.selected.iter().all(|c| c.pair_id != 1004));

    opts.mode = Mode::Train;
    let a = retrieve(&query, &model, &idx, &opts).unwrap();
    assert_eq!(a, retrieve(&query, &model, &idx, &opts).unwrap());
    let pairs = materialize(&a, &idx, |id| Ok(items.iter().find(|i| i.pair_id == id).unwrap().image.clone().unwrap())).unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs.iter().all(|p| !p.caption.is_empty()));

    opts.r = 0;
    assert!(retrieve(&query, &model, &idx, &opts).unwrap().selected.is_empty());
}
