//! Behavior of the command-line interface: exit codes, error paths, and the
//! smaller contracts not covered by the acceptance suite.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semparse"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let out = run(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    // help is not an error
    let out = run(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("train"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["train", "--corpus", "no_such_file", "--lang", "en"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // embed with the target as the only language
    let single = dir.path().join("single.corpus");
    std::fs::write(
        &single,
        "lang en\n%%\nE:leaf()\n%%\nid 0 en\nnl: a\nmrl: leaf\n",
    )
    .unwrap();
    let out = run(
        &[
            "embed",
            "--corpus",
            single.to_str().unwrap(),
            "--lang",
            "en",
            "--rank",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("only language"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn embed_writes_tsv_and_binary() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("synth_tiny.corpus");
    let out = run(
        &[
            "embed",
            "--corpus",
            corpus.to_str().unwrap(),
            "--lang",
            "syn",
            "--rank",
            "4",
            "--cooc-mode",
            "binary",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let tsv = dir.path().join("out/syn/embeddings_d4.tsv");
    let text = std::fs::read_to_string(&tsv).unwrap();
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 1 + 4);
    }
    // 11 units live in the auxiliary data (9 functions + 2 constants)
    assert_eq!(text.lines().count(), 11);
    assert!(dir.path().join("out/syn/embeddings_d4.bin").exists());
}

fn quick_train(dir: &Path, extra: &[&str]) -> PathBuf {
    let corpus = fixture("synth_tiny.corpus");
    let mut args = vec![
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--lang",
        "syn",
        "--train-count",
        "30",
        "--iterations",
        "60",
    ];
    args.extend_from_slice(extra);
    let out = run(&args, dir);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("out/syn/ht-d/model.json")
}

#[test]
fn eval_on_disjoint_vocabulary_does_not_crash() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_train(dir.path(), &[]);
    let corpus = fixture("synth_tiny.corpus");
    // the axa words are all outside the model's vocabulary
    let out = run(
        &[
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
            "--lang",
            "axa",
            "--train-count",
            "30",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let acc: f64 = text
        .split("Acc ")
        .nth(1)
        .and_then(|s| s.split('%').next())
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(acc <= 50.0, "disjoint vocabulary should score low: {text}");
}

#[test]
fn parse_prints_form_or_no_parse() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_train(dir.path(), &[]);
    let out = run(
        &[
            "parse",
            "--model",
            model.to_str().unwrap(),
            "ask",
            "flip",
            "beta",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "ask(flip(beta))");

    // a single token cannot host ask + a child
    let out = run(
        &["parse", "--model", model.to_str().unwrap(), "ask"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "NO_PARSE");

    // the structural guard turns oversized parses into NO_PARSE
    let out = run(
        &[
            "parse",
            "--model",
            model.to_str().unwrap(),
            "--max-nodes",
            "1",
            "ask",
            "flip",
            "beta",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "NO_PARSE");
}

#[test]
fn model_version_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_train(dir.path(), &[]);
    let text = std::fs::read_to_string(&model).unwrap();
    let hacked = text.replacen("\"version\":1", "\"version\":99", 1);
    assert_ne!(text, hacked, "dump format changed?");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, hacked).unwrap();
    let out = run(
        &[
            "parse",
            "--model",
            bad.to_str().unwrap(),
            "ask",
            "flip",
            "beta",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("version"), "{}", stderr(&out));
}

#[test]
fn train_log_and_config_snapshot_exist() {
    let dir = tempfile::tempdir().unwrap();
    quick_train(dir.path(), &[]);
    let log = std::fs::read_to_string(dir.path().join("out/syn/ht-d/train_log.tsv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next(),
        Some("iteration\tobjective\tgrad_norm\tdev_f1")
    );
    assert!(lines.next().unwrap().starts_with("1\t"));
    let config = std::fs::read_to_string(dir.path().join("out/syn/ht-d/config.json")).unwrap();
    assert!(config.contains("\"seed\""));
}

#[test]
fn neural_params_land_in_the_dump() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("synth_tiny.corpus");
    let out = run(
        &[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--lang",
            "syn",
            "--train-count",
            "30",
            "--mode",
            "ht-d+nn",
            "--nn-window",
            "2",
            "--iterations",
            "5",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let (model, meta) =
        semparse::hybridtree::ModelParams::load(dir.path().join("out/syn/ht-d+nn/model.json"))
            .unwrap();
    let nn = model.neural.expect("+nn mode must dump neural parameters");
    assert_eq!(nn.window, 2);
    assert_eq!(meta.get("mode").map(String::as_str), Some("ht-d+nn"));

    // plain mode must not
    let out = run(
        &[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--lang",
            "syn",
            "--train-count",
            "30",
            "--mode",
            "ht-d",
            "--iterations",
            "5",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let (model, _) =
        semparse::hybridtree::ModelParams::load(dir.path().join("out/syn/ht-d/model.json"))
            .unwrap();
    assert!(model.neural.is_none());
}

#[test]
fn embed_at_rank_thirty_has_thirty_dimensional_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("synth_multi.corpus");
    let out = run(
        &[
            "embed",
            "--corpus",
            corpus.to_str().unwrap(),
            "--lang",
            "syn",
            "--rank",
            "30",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("out/syn/embeddings_d30.tsv")).unwrap();
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 1 + 30);
    }
    assert!(text.lines().count() >= 30);
}

#[test]
fn numeric_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("synth_tiny.corpus");
    let bad = dir.path().join("bad_embeddings.tsv");
    std::fs::write(&bad, "Q:ask(E)\tnan\t0.0\n").unwrap();
    let out = run(
        &[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--lang",
            "syn",
            "--train-count",
            "30",
            "--mode",
            "ht-d+o",
            "--embeddings",
            bad.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
