use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "n_users=60",
    "--set",
    "n_items=40",
    "--set",
    "interactions_per_user=8",
    "--set",
    "n_spans=4",
];

fn tdslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdslab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = tdslab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["gen", "--seed", "4", "--out", p(&data)];
    args.extend_from_slice(SMALL);
    ok(&args);
    data
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.ends_with("timing.jsonl") {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) {
    let data = gen(root);
    let run = root.join("run");
    ok(&["train", "--data", p(&data), "--method", "elbo_tds", "--seed", "2", "--set", "probe_rows=128", "--out", p(&run)]);
    ok(&["eval", "--data", p(&data), "--run", p(&run), "--out", p(&root.join("eval"))]);
    ok(&["drift", "--data", p(&data), "--out", p(&root.join("drift"))]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names: BTreeSet<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for needed in ["data/manifest.txt", "run/runlog.ndjson", "run/final.ckpt", "eval/eval_span_003.json", "drift/drift.ndjson"] {
        assert!(names.contains(needed), "missing {needed}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn every_output_has_a_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    for sub in ["data", "run", "eval", "drift"] {
        let echo = std::fs::read_to_string(dir.path().join(sub).join("config_echo.txt")).unwrap();
        assert!(echo.starts_with("tool=tdslab "), "{sub}: {echo}");
        assert!(echo.contains("schema_hash="), "{sub}");
    }
    let train = std::fs::read_to_string(dir.path().join("run/config_echo.txt")).unwrap();
    assert!(train.contains("method=elbo_tds\n") && train.contains("seed=2\n"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdslab(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = tdslab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    let data = gen(dir.path());
    let bad = dir.path().join("bad");
    let out = tdslab(&["train", "--data", p(&data), "--set", "bogus_key=1", "--out", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8(out.stderr).unwrap();
    assert_eq!(msg.lines().count(), 1, "{msg}");
    assert!(msg.contains("bogus_key"));
    assert!(bad.join("INCOMPLETE").exists());

    let out = tdslab(&["compare", "--data", p(&data), "--methods", "aug,elbo_tds", "--out", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(tdslab(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two_and_mark_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = tdslab(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
    assert!(out_dir.join("INCOMPLETE").exists());

    // A checkpoint that has seen span 2 may not be evaluated on it.
    let data = gen(dir.path());
    ok(&["train", "--data", p(&data), "--set", "method=erm", "--out", p(&out_dir)]);
    assert!(!out_dir.join("INCOMPLETE").exists());
    let eval_dir = dir.path().join("eval");
    let out = tdslab(&["eval", "--data", p(&data), "--run", p(&out_dir), "--span", "2", "--out", p(&eval_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(eval_dir.join("INCOMPLETE").exists());
    assert!(!eval_dir.join("eval_span_002.json").exists());
}

#[test]
fn resumed_training_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let common = ["--method", "aug", "--set", "probe_rows=64"];
    let mut args = vec!["train", "--data", p(&data), "--out", p(&full)];
    args.extend_from_slice(&common);
    ok(&args);
    let mut args = vec!["train", "--data", p(&data), "--out", p(&part), "--stop-after", "0"];
    args.extend_from_slice(&common);
    ok(&args);
    let ck = part.join("checkpoints/span_000.ckpt");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&part), "--resume", p(&ck)];
    args.extend_from_slice(&common);
    ok(&args);
    for f in ["runlog.ndjson", "final.ckpt", "checkpoints/span_002.ckpt"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_emits_one_delta_row_per_span_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let out = dir.path().join("cmp");
    ok(&[
        "compare", "--data", p(&data), "--methods", "erm,elbo_tds", "--seeds", "2", "--set", "probe_rows=64", "--out", p(&out),
    ]);
    let runlog = std::fs::read_to_string(out.join("runlog.ndjson")).unwrap();
    let records: Vec<serde_json::Value> = runlog.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let keys: BTreeSet<(u64, String)> = records
        .iter()
        .filter(|r| r["method"] == "erm" && r["seed"] == 0)
        .map(|r| (r["span"].as_u64().unwrap(), r["metric"].as_str().unwrap().to_owned()))
        .collect();
    let seeds: BTreeSet<u64> = records.iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, BTreeSet::from([0, 1]));

    let rows: Vec<serde_json::Value> = std::fs::read_to_string(out.join("compare.ndjson"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), keys.len());
    let row_keys: BTreeSet<(u64, String)> = rows
        .iter()
        .map(|r| (r["span"].as_u64().unwrap(), r["metric"].as_str().unwrap().to_owned()))
        .collect();
    assert_eq!(row_keys, keys);

    // Recompute one delta row from the joined log.
    let row = rows.iter().find(|r| r["span"] == 1 && r["metric"] == "auc.task0").unwrap();
    let value = |m: &str, s: u64| {
        records
            .iter()
            .find(|r| r["method"] == m && r["seed"] == s && r["span"] == 1 && r["metric"] == "auc.task0")
            .unwrap()["value"]
            .as_f64()
            .unwrap()
    };
    let d: Vec<f64> = (0..2).map(|s| value("elbo_tds", s) - value("erm", s)).collect();
    let mean = (d[0] + d[1]) / 2.0;
    let std = ((d[0] - mean).powi(2) + (d[1] - mean).powi(2)).sqrt();
    assert_eq!(row["seeds"], 2);
    assert!((row["mean_delta"].as_f64().unwrap() - mean).abs() < 1e-15);
    assert!((row["std_delta"].as_f64().unwrap() - std).abs() < 1e-15);
    assert!(out.join("elbo_tds/seed_1/final.ckpt").exists());
}
