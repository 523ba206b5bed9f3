use std::process::Command;

fn harness() -> Command {
    Command::new(env!("CARGO_BIN_EXE_veil-harness"))
}

#[test]
fn corpus_gen_reproduces_bundled_file() {
    let out = harness().args(["corpus", "gen"]).output().unwrap();
    assert!(out.status.success());
    let bundled = include_str!("../../core/data/corpus.jsonl");
    assert_eq!(String::from_utf8(out.stdout).unwrap(), bundled);
}

#[test]
fn verify_passes_on_default_grid() {
    let out = harness().arg("verify").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.ends_with("verify: PASS\n"));
}

#[test]
fn run_writes_reports() {
    let dir = std::env::temp_dir().join(format!("veil-harness-cli-{}", std::process::id()));
    let out = harness()
        .args([
            "run",
            "--method",
            "edge_only",
            "--epsilon",
            "2",
            "--out-dir",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["records.jsonl", "cells.jsonl", "summary.csv", "summary.txt"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("edge_only,2.0,"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn bad_arguments_fail() {
    assert!(!harness()
        .args(["run", "--method", "telepathy"])
        .status()
        .unwrap()
        .success());
    let out = harness()
        .args(["run", "--epsilon", "-1", "--out-dir", "/nonexistent/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
