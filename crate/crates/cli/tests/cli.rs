use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set=synth.n_clusters=4",
    "--set=synth.pairs_per_cluster=4",
    "--set=synth.vqa_per_cluster=6",
    "--set=synth.heldout_clusters=1",
    "--set=train.epochs=1",
    "--set=finetune.epochs=1",
];

fn ramm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ramm"))
        .current_dir(dir)
        .args(args)
        .args(TINY)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ramm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    ramm(dir, args).status.code().unwrap()
}

#[test]
fn full_pipeline_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-synth", "--out", "data"]);
    ok(d, &["pretrain", "--corpus", "data/corpus", "--vqa", "data/vqa_train.jsonl", "--out", "ck"]);
    assert!(d.join("ck/train_log.tsv").is_file());
    ok(d, &["build-index", "--checkpoint", "ck", "--corpus", "data/corpus", "--out", "idx.bin"]);
    let task = ["--checkpoint", "ck", "--index", "idx.bin", "--corpus", "data/corpus"];
    ok(d, &[&["finetune"][..], &task, &["--train", "data/vqa_train.jsonl", "--out", "ft", "--r", "2"]].concat());

    let table = ok(
        d,
        &["eval", "--checkpoint", "ft", "--index", "idx.bin", "--corpus", "data/corpus", "--test", "data/vqa_test.jsonl", "--out", "ev"],
    );
    assert!(table.starts_with("r\toverall"));
    assert!(table.lines().nth(1).unwrap().starts_with("2\t"));
    for f in ["report.txt", "report.jsonl", "predictions.jsonl", "stats.txt", "stats.jsonl"] {
        assert!(d.join("ev").join(f).is_file(), "{f}");
    }
    assert!(fs::read_to_string(d.join("ev/report.txt")).unwrap().starts_with("# config="));
    let stats = ok(d, &["stats", "--predictions", "ev/predictions.jsonl"]);
    assert!(stats.contains("SYNTH\t100.00"));

    let hits = ok(
        d,
        &["retrieve", "--index", "idx.bin", "--query-tensor", "data/images/q000-000.ten", "--r", "3", "--checkpoint", "ck"],
    );
    assert_eq!(hits.lines().count(), 3);
    assert!(hits.lines().all(|l| l.split('\t').count() == 6));

    let sweep = ok(d, &[&["sweep-r"][..], &task, &["--train", "data/vqa_train.jsonl", "--test", "data/vqa_test.jsonl", "--rs", "0,1,2", "--out", "sw"]].concat());
    let rs: Vec<&str> = sweep.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rs, ["0", "1", "2"]);
    assert_eq!(fs::read_to_string(d.join("sw/sweep.jsonl")).unwrap().lines().count(), 3);

    // A second checkpoint with different weights gives an index the first one must reject.
    ok(d, &["pretrain", "--corpus", "data/corpus", "--out", "ck2", "--seed", "7"]);
    ok(d, &["build-index", "--checkpoint", "ck2", "--corpus", "data/corpus", "--out", "idx2.bin"]);
    let wrong = ["--checkpoint", "ck", "--index", "idx2.bin", "--corpus", "data/corpus"];
    assert_eq!(code(d, &[&["finetune"][..], &wrong, &["--train", "data/vqa_train.jsonl", "--out", "x"]].concat()), 4);

    assert_eq!(code(d, &[&["finetune"][..], &task, &["--train", "data/vqa_train.jsonl", "--out", "x", "--r", "99"]].concat()), 5);
    assert_eq!(code(d, &["retrieve", "--index", "idx.bin", "--query-tensor", "data/images/q000-000.ten", "--r", "0", "--checkpoint", "ck"]), 5);
    assert_eq!(code(d, &["retrieve", "--index", "none.bin", "--query-tensor", "data/images/q000-000.ten", "--r", "1"]), 3);
    assert_eq!(code(d, &["eval", "--checkpoint", "nowhere", "--index", "idx.bin", "--corpus", "data/corpus", "--test", "data/vqa_test.jsonl", "--out", "e"]), 3);

    let mut bytes = fs::read(d.join("idx.bin")).unwrap();
    bytes[..8].copy_from_slice(b"NOTANIDX");
    fs::write(d.join("bad.bin"), bytes).unwrap();
    fs::copy(d.join("idx.bin.captions"), d.join("bad.bin.captions")).unwrap();
    assert_eq!(code(d, &["retrieve", "--index", "bad.bin", "--query-tensor", "data/images/q000-000.ten", "--r", "1", "--checkpoint", "ck"]), 6);
    assert_eq!(code(d, &["gen-synth", "--out", "q", "--set", "no.such.key=1"]), 7);
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-synth", "--out", "data"]);
    for (out, extra) in [("a", None), ("b", Some("--sequential"))] {
        let mut args = vec!["pretrain", "--corpus", "data/corpus", "--out", out];
        args.extend(extra);
        ok(d, &args);
    }
    assert_eq!(fs::read(d.join("a/train_log.tsv")).unwrap(), fs::read(d.join("b/train_log.tsv")).unwrap());
}
