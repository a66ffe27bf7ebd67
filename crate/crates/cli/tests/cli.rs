//! Runs the `dctl` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn dctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dctl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dctl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--layers", "2", "--kernels", "4", "--iters", "10"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn synth(dir: &Path, format: &str, out: &str) {
    ok(dir, &["synth", "--per-class", "10", "--length", "32", "--format", format, "-o", out]);
}

#[test]
fn train_writes_model_and_monotone_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "csv-matrix", "s.csv");
    ok(d, &with(&["train", "s.csv", "-o", "m.dctl", "--trace-out", "trace.csv"], SMALL));
    assert!(d.join("m.dctl").exists());

    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,layer,objective"));
    let values: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(values.len() > 1);
    assert!(values.windows(2).all(|w| w[1] <= w[0]), "{values:?}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = dctl(d, &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = dctl(d, &["train", "x.csv", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(dctl(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dctl(dir.path(), &["train", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn benchmark_prints_one_row_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "csv-matrix", "s.csv");
    let stdout = ok(d, &["benchmark", "s.csv", "--kernels", "4", "--iters", "5"]);
    let lines: Vec<&str> = stdout.lines().collect();
    let header = lines.iter().position(|l| l.starts_with("layers")).expect("table header");
    let rows = &lines[header + 1..];
    assert_eq!(rows.len(), 4, "{stdout}");
    for (depth, row) in (1..).zip(rows) {
        assert_eq!(row.split_whitespace().next(), Some(depth.to_string().as_str()));
    }
}

#[test]
fn encode_and_classify_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "csv-matrix", "s.csv");
    ok(d, &with(&["train", "s.csv", "-o", "m.dctl"], SMALL));

    ok(d, &["encode", "s.csv", "--model", "m.dctl", "-o", "a.csv"]);
    ok(d, &["encode", "s.csv", "--model", "m.dctl", "-o", "b.csv"]);
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());

    let first = ok(d, &with(&["classify", "s.csv"], SMALL));
    let second = ok(d, &with(&["classify", "s.csv"], SMALL));
    assert_eq!(first, second);
    assert!(first.contains("raw") && first.contains("dctl-2"), "{first}");
}

#[test]
fn saved_model_encodes_like_a_fresh_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "csv-matrix", "s.csv");
    ok(d, &with(&["train", "s.csv", "-o", "m.dctl"], SMALL));
    // Without --model, classify retrains with the same seed and split.
    let loaded = ok(d, &with(&["classify", "s.csv", "--model", "m.dctl"], SMALL));
    let fresh = ok(d, &with(&["classify", "s.csv"], SMALL));
    assert_eq!(loaded, fresh);
}

#[test]
fn raw_and_csv_inputs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "csv-matrix", "s.csv");
    synth(d, "raw-f64", "s.bin");
    let csv = ok(d, &with(&["classify", "s.csv"], SMALL));
    let raw = ok(d, &with(&["classify", "s.bin", "--format", "raw-f64"], SMALL));
    assert_eq!(csv, raw);
}

#[test]
fn cluster_reports_every_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "csv-matrix", "s.csv");
    let stdout = ok(d, &with(&["cluster", "s.csv"], SMALL));
    for init in ["random", "kmeanspp", "pca"] {
        let count = stdout
            .lines()
            .filter(|l| l.split_whitespace().nth(1) == Some(init))
            .count();
        assert_eq!(count, 2, "{init}: {stdout}");
    }
}
