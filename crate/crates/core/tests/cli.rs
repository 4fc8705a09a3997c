//! Runs the built binary: exit codes, version output and corpus determinism.

use std::path::Path;
use std::process::{Command, Output};

fn ctxmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxmatch")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn version_reports_format_versions() {
    let out = ctxmatch(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("checkpoint format 1") && text.contains("corpus format 1"), "{text}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = ctxmatch(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ctxmatch(&["gen-corpus", "--out", "x", "--noise", "abc"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = ctxmatch(&["evaluate", "--gold", s(&missing), "--pred", s(&missing), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"S1\"\n").unwrap();
    let out = ctxmatch(&["train", "--taxonomy", s(&bad), "--pairs", s(&bad), "--dev", s(&bad), "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl"));
}

#[test]
fn invalid_option_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxmatch(&["gen-corpus", "--out", s(dir.path()), "--noise", "1.5"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_corpus_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = ctxmatch(&["--seed", seed, "gen-corpus", "--skills", "10", "--out", s(&out_dir)]);
        assert_eq!(out.status.code(), Some(0));
        ["taxonomy.jsonl", "pairs.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"]
            .map(|f| std::fs::read(out_dir.join(f)).unwrap())
    };
    assert_eq!(run("a", "7"), run("b", "7"));
    assert_ne!(run("c", "8")[1], run("a", "7")[1]);
}

#[test]
fn evaluate_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert_eq!(ctxmatch(&["gen-corpus", "--skills", "5", "--out", s(&corpus)]).status.code(), Some(0));
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(&pred, "{\"ad_id\":\"nope\",\"sentence_index\":0,\"predictions\":[]}\n").unwrap();
    let out = ctxmatch(&[
        "evaluate",
        "--gold",
        s(&corpus.join("test.jsonl")),
        "--pred",
        s(&pred),
        "--out",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
