use std::path::Path;

use reltab::cli::run;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("reltab").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["--version"]), 0);
    assert_eq!(cli(&["train", "--help"]), 0);
}

#[test]
fn bad_invocations_exit_two() {
    assert_eq!(cli(&[]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["ingest", "--data", ".", "--out", ".", "--bogus"]), 2);
    assert_eq!(cli(&["eval", "--model", "m"]), 2);
    assert_eq!(cli(&["synth", "--kind", "nope", "--seed", "1", "--out", "x"]), 2);
    assert_eq!(cli(&["train", "--data", ".", "--out", ".", "--split", "0.5,0.5"]), 2);
}

#[test]
fn missing_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    assert_eq!(cli(&["ingest", "--data", path(&nowhere), "--out", path(dir.path())]), 1);
    assert_eq!(cli(&["eval", "--model", path(&nowhere), "--data", path(&nowhere), "--out", path(dir.path())]), 1);
}

#[test]
fn task_and_seed_problems_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fd");
    assert_eq!(cli(&["synth", "--kind", "fd", "--seed", "0", "--out", path(&data)]), 0);
    let out = dir.path().join("out");
    let base = ["train", "--data", path(&data), "--out", path(&out), "--quiet"];
    let with = |extra: &[&str]| cli(&base.iter().chain(extra).copied().collect::<Vec<_>>());
    if std::env::var_os(reltab::config::SEED_ENV).is_none() {
        assert_eq!(with(&["--table", "fd", "--column", "c"]), 2);
    }
    assert_eq!(with(&["--seed", "1"]), 2);
    assert_eq!(with(&["--seed", "1", "--table", "fd"]), 2);
    assert_eq!(with(&["--seed", "1", "--table", "fd", "--column", "zzz"]), 1);
    assert_eq!(with(&["--seed", "1", "--variant", "j", "--table", "fd", "--column", "c"]), 2);
}

#[test]
fn ingest_writes_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("join");
    assert_eq!(cli(&["synth", "--kind", "join", "--seed", "3", "--keys", "12", "--out", path(&data)]), 0);
    let out = dir.path().join("out");
    assert_eq!(cli(&["ingest", "--data", path(&data), "--out", path(&out)]), 0);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("ingest.json")).unwrap()).unwrap();
    assert_eq!(summary["tables"][0]["rows"], 12);
    assert_eq!(summary["spaces"], 3);
    let vocab = std::fs::read_to_string(out.join("vocab.jsonl")).unwrap();
    assert!(vocab.lines().count() > 12);
    let manifest = reltab::artifacts::Manifest::load_or_default(&out).unwrap();
    let kinds: Vec<&str> = manifest.kinds().collect();
    assert!(kinds.contains(&"ingest_summary") && kinds.contains(&"vocabulary"));
}

#[test]
fn selftest_subcommand_passes() {
    assert_eq!(cli(&["selftest", "--points", "3"]), 0);
}
