use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn polylm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polylm")).args(args).env("RUST_LOG", "info").output().expect("spawn polylm")
}

fn ok(args: &[&str]) -> Output {
    let out = polylm(args);
    assert!(out.status.success(), "polylm {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Builds the toy vocabulary into `dir` with optional overrides.
fn toy_vocab(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("toy.vocab");
    let (corpus, conf) = (data("toy_corpus.txt"), data("toy.conf"));
    let mut args = vec!["build-vocab", "--corpus", s(&corpus), "--out", s(&out), "--config", s(&conf)];
    for e in extra {
        args.extend(["--set", e]);
    }
    ok(&args);
    out
}

const SMALL: &[&str] = &[
    "--set",
    "d_model=16",
    "--set",
    "filter_size=32",
    "--set",
    "n_heads=2",
    "--set",
    "layers_disamb=1",
    "--set",
    "layers_predict=1",
    "--set",
    "seq_len=16",
    "--set",
    "batch_size=4",
    "--set",
    "checkpoint_every=10",
];

fn train(dir: &Path, vocab: &Path, extra: &[&str]) -> Output {
    let corpus = data("toy_corpus.txt");
    let mut args = vec!["train", "--corpus", s(&corpus), "--vocab", s(vocab), "--out", s(dir)];
    args.extend(SMALL);
    args.extend(extra);
    polylm(&args)
}

#[test]
fn build_vocab_matches_golden_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy_vocab(dir.path(), &[]);
    let first = fs::read(&a).unwrap();
    assert_eq!(String::from_utf8(first.clone()).unwrap(), fs::read_to_string(data("toy.vocab")).unwrap());
    let b = toy_vocab(dir.path(), &[]);
    assert_eq!(first, fs::read(b).unwrap());
}

#[test]
fn oversized_min_count_leaves_specials_and_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let r = ok(&[
        "build-vocab",
        "--corpus",
        s(&data("toy_corpus.txt")),
        "--out",
        s(&out),
        "--set",
        "min_count=1000",
        "--set",
        "multi_sense_min_count=1000",
    ]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("specials only"));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 11);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = polylm(&[
        "build-vocab",
        "--corpus",
        s(&data("toy_corpus.txt")),
        "--out",
        s(&dir.path().join("v")),
        "--set",
        "min_cnt=3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_cnt"));
    let out = polylm(&["build-vocab", "--corpus", "/nonexistent/corpus", "--out", s(&dir.path().join("v"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(polylm(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn seeded_training_runs_log_identically() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = toy_vocab(dir.path(), &[]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let r = train(d, &vocab, &["--steps", "200", "--seed", "7"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let log = fs::read_to_string(a.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 201);
    assert!(log.starts_with("step\tlr\tlambdaM\tr\tJ_LM\tJ_D\tJ_M\n0\t"));
    assert_eq!(log, fs::read_to_string(b.join("train.log")).unwrap());
    let resolved = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(resolved.contains("seed = 7") && resolved.contains("steps = 200") && resolved.contains("preset = desk"));
    // A second fresh run into a used directory is refused.
    assert_eq!(train(&a, &vocab, &["--steps", "200"]).status.code(), Some(1));
}

#[test]
fn resumed_training_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = toy_vocab(dir.path(), &[]);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert!(train(&full, &vocab, &["--steps", "40", "--seed", "3"]).status.success());
    assert!(train(&split, &vocab, &["--steps", "40", "--seed", "3", "--stop-at", "15"]).status.success());
    assert_eq!(fs::read_to_string(split.join("train.log")).unwrap().lines().count(), 16);
    let r =
        ok(&["train", "--corpus", s(&data("toy_corpus.txt")), "--vocab", s(&vocab), "--out", s(&split), "--resume"]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("resuming"));
    assert_eq!(
        fs::read_to_string(full.join("train.log")).unwrap(),
        fs::read_to_string(split.join("train.log")).unwrap()
    );
    let ck = "ckpt-00000040.plm";
    assert_eq!(fs::read(full.join(ck)).unwrap(), fs::read(split.join(ck)).unwrap());
    let kept: Vec<_> = fs::read_dir(&full)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt-"))
        .collect();
    assert_eq!(kept.len(), 2);
}

#[test]
fn bad_training_options_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = toy_vocab(dir.path(), &[]);
    assert_eq!(train(&dir.path().join("x"), &vocab, &["--preset", "enormous"]).status.code(), Some(1));
    assert_eq!(train(&dir.path().join("y"), &vocab, &["--set", "r_final=0.5"]).status.code(), Some(1));
    assert_eq!(train(&dir.path().join("z"), &vocab, &["--resume"]).status.code(), Some(1));
}

#[test]
fn single_sense_vocabulary_labels_sense_zero() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = toy_vocab(dir.path(), &["senses_per_word=1"]);
    let run = dir.path().join("run");
    assert!(train(&run, &vocab, &["--steps", "5"]).status.success());
    let ds = dir.path().join("wsi.tsv");
    fs::write(
        &ds,
        "i1\tbank\t1\tthe bank raised its rates\n\
         i2\tbank\t5\tshe sat on the river bank\n\
         i3\tbank\t0\tthe bank raised its rates\n\
         i4\tzebra\t0\tzebra crossing\n",
    )
    .unwrap();
    for protocol in ["single", "multi"] {
        let out = dir.path().join(format!("{protocol}.lab"));
        ok(&["wsi", "--checkpoint", s(&run), "--dataset", s(&ds), "--out", s(&out), "--protocol", protocol]);
        let lab = fs::read_to_string(&out).unwrap();
        assert_eq!(lab.lines().count(), 2);
        for line in lab.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            assert_eq!(f[2].split('/').next().unwrap(), "bank.0");
        }
        let skipped = fs::read_to_string(dir.path().join(format!("{protocol}.lab.skipped"))).unwrap();
        let ids: Vec<&str> = skipped.lines().map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(ids, ["i3", "i4"]);
    }
    let out = polylm(&[
        "wsi",
        "--checkpoint",
        s(&run),
        "--dataset",
        s(&ds),
        "--out",
        s(&dir.path().join("m")),
        "--protocol",
        "multi",
        "--p-thresh",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_identical_labeling_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold");
    fs::write(
        &gold,
        "a\tbank\tbank.1\nb\tbank\tbank.2\nc\tbank\tbank.1\nd\tmill\tmill.1/0.7,mill.2/0.3\ne\tmill\tmill.2\n",
    )
    .unwrap();
    for style in ["2010", "2013"] {
        let out = ok(&["eval", "--labeling", s(&gold), "--gold", s(&gold), "--task-style", style, "--tsv"]);
        let text = String::from_utf8(out.stdout).unwrap();
        assert_eq!(text.lines().count(), 9);
        for line in text.lines() {
            let v: f64 = line.rsplit('\t').next().unwrap().parse().unwrap();
            assert!((v - 100.0).abs() < 1e-9, "{line}");
        }
        assert!(text.contains("AVG\t__ALL__\t100"));
    }
    let table = String::from_utf8(ok(&["eval", "--labeling", s(&gold), "--gold", s(&gold)]).stdout).unwrap();
    assert!(table.contains("F-S") && table.contains("V-M") && table.contains("100.0"));
}

#[test]
fn eval_mismatched_ids_lists_first_ten() {
    let dir = tempfile::tempdir().unwrap();
    let (gold, lab) = (dir.path().join("gold"), dir.path().join("lab"));
    let g: String = (0..15).map(|i| format!("g{i}\tw\tw.1\n")).collect();
    let l: String = (0..15).map(|i| format!("l{i}\tw\tw.1\n")).collect();
    fs::write(&gold, g).unwrap();
    fs::write(&lab, l).unwrap();
    let out = polylm(&["eval", "--labeling", s(&lab), "--gold", s(&gold)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("30 instance ids"), "{err}");
    assert_eq!(err.matches("(labeling only)").count(), 10);
    assert_eq!(
        polylm(&["eval", "--labeling", s(&lab), "--gold", s(&gold), "--task-style", "2007"]).status.code(),
        Some(1)
    );
}

#[test]
fn selfcheck_passes_and_catches_injected_fault() {
    let out = ok(&["selfcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 7 && text.lines().all(|l| l.starts_with("PASS")), "{text}");
    let out = polylm(&["selfcheck", "--inject-fault", "segmentlogsumexp"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL logit gradient identity"));
    assert_eq!(polylm(&["selfcheck", "--inject-fault", "nope"]).status.code(), Some(1));
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", s(d), "--sentences", "3000", "--seed", "5"]);
    let vocab = d.join("vocab.tsv");
    ok(&["build-vocab", "--corpus", s(&d.join("train.txt")), "--config", s(&d.join("vocab.conf")), "--out", s(&vocab)]);
    let v = fs::read_to_string(&vocab).unwrap();
    assert!(v.lines().any(|l| l.starts_with("apple_piano\t") && l.ends_with("\t8")));
    let run = d.join("run");
    let corpus = d.join("train.txt");
    let mut args = vec!["train", "--corpus", s(&corpus), "--vocab", s(&vocab), "--out", s(&run), "--steps", "20"];
    args.extend(SMALL);
    ok(&args);
    let lab = d.join("labels.tsv");
    ok(&["wsi", "--checkpoint", s(&run), "--dataset", s(&d.join("eval.tsv")), "--out", s(&lab), "--protocol", "multi"]);
    let out = ok(&["eval", "--labeling", s(&lab), "--gold", s(&d.join("gold.tsv")), "--task-style", "2013"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("FBC") && table.contains("apple_piano") && table.contains("__ALL__"));

    let nb =
        String::from_utf8(ok(&["neighbors", "--checkpoint", s(&run), "--word", "apple_piano", "--top", "3"]).stdout)
            .unwrap();
    assert_eq!(nb.lines().count(), 24);
    assert!(nb
        .lines()
        .all(|l| l.starts_with("apple_piano.") && !l.split('\t').nth(1).unwrap().starts_with("apple_piano.")));
    assert_eq!(
        polylm(&["neighbors", "--checkpoint", s(&run), "--word", "apple_piano", "--sense", "9"]).status.code(),
        Some(1)
    );

    let words = d.join("words");
    fs::write(&words, "apple_piano\nsong\n").unwrap();
    let emb = d.join("emb.tsv");
    ok(&[
        "export",
        "--checkpoint",
        s(&run),
        "--out",
        s(&emb),
        "--words",
        s(&words),
        "--usage-corpus",
        s(&d.join("train.txt")),
        "--max-per-word",
        "50",
    ]);
    let rows = fs::read_to_string(&emb).unwrap();
    assert_eq!(rows.lines().count(), 9);
    assert_eq!(rows.lines().next().unwrap().split('\t').count(), 2 + 16);
    let dead = fs::read_to_string(d.join("emb.tsv.dead")).unwrap();
    assert!(dead.lines().all(|l| l.split('\t').count() == 3));
}
