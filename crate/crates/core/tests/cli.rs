use std::path::Path;
use std::process::Command;

use hexcover::policy::{Checkpoint, PolicyDims, PolicyParams};

fn hexcover(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hexcover"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (code, stdout, stderr) = hexcover(dir, args);
    assert_eq!(code, 0, "{args:?}\n{stderr}");
    stdout
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

const SMALL_NET: [&str; 8] = ["--group-size", "4", "--batch-size", "4", "--d-model", "8", "--heads", "2"];

fn tiny_corpus(dir: &Path) {
    ok(dir, &["generate", "--out", "tiny.jsonl", "--count", "10", "--seed", "2", "--tiny"]);
}

fn train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--corpus", "tiny.jsonl", "--out-dir", out, "--seed", "5"];
    args.extend(SMALL_NET);
    args.extend(extra);
    ok(dir, &args);
}

#[test]
fn generate_is_deterministic_and_audit_accepts_it() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--out", "a.jsonl", "--count", "12", "--seed", "9"]);
    ok(d.path(), &["generate", "--out", "b.jsonl", "--count", "12", "--seed", "9"]);
    assert_eq!(read(d.path(), "a.jsonl"), read(d.path(), "b.jsonl"));
    let text = String::from_utf8(read(d.path(), "a.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    ok(d.path(), &["audit", "--corpus", "a.jsonl"]);
}

#[test]
fn zero_count_writes_an_empty_corpus() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--out", "empty.jsonl", "--count", "0"]);
    assert!(read(d.path(), "empty.jsonl").is_empty());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.toml"), "[generate]\nmaster_seed = 4\n").unwrap();
    ok(d.path(), &["--config", "run.toml", "generate", "--out", "file.jsonl", "--count", "5"]);
    ok(d.path(), &["generate", "--out", "flag.jsonl", "--count", "5", "--seed", "4"]);
    ok(d.path(), &["--config", "run.toml", "generate", "--out", "over.jsonl", "--count", "5", "--seed", "6"]);
    ok(d.path(), &["generate", "--out", "six.jsonl", "--count", "5", "--seed", "6"]);
    assert_eq!(read(d.path(), "file.jsonl"), read(d.path(), "flag.jsonl"));
    assert_eq!(read(d.path(), "over.jsonl"), read(d.path(), "six.jsonl"));
    assert_ne!(read(d.path(), "file.jsonl"), read(d.path(), "six.jsonl"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.toml"), "[generate]\nmaster_sed = 4\n").unwrap();
    let (code, _, _) = hexcover(d.path(), &["--config", "bad.toml", "generate", "--out", "x.jsonl", "--count", "1"]);
    assert_eq!(code, 2);
}

#[test]
fn missing_inputs_are_data_errors() {
    let d = tempfile::tempdir().unwrap();
    let (code, _, _) = hexcover(d.path(), &["solve", "--corpus", "nope.jsonl", "--method", "all", "--out", "m.csv"]);
    assert_eq!(code, 3);
    tiny_corpus(d.path());
    let (code, _, _) = hexcover(
        d.path(),
        &["solve", "--corpus", "tiny.jsonl", "--mode", "greedy", "--checkpoint", "missing.json", "--out", "m.csv"],
    );
    assert_eq!(code, 3);
}

#[test]
fn zero_epochs_saves_the_initial_policy() {
    let d = tempfile::tempdir().unwrap();
    tiny_corpus(d.path());
    train(d.path(), "run", &["--epochs", "0"]);
    let ck = Checkpoint::load(&d.path().join("run/checkpoint.json")).unwrap();
    let dims = PolicyDims { d: 8, heads: 2, ..PolicyDims::default() };
    let init = PolicyParams::init(dims, 5).unwrap();
    assert_eq!(ck.header.epoch, 0);
    assert_eq!(ck.to_params().unwrap().theta, init.theta);
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    tiny_corpus(d.path());
    train(d.path(), "full", &["--epochs", "2", "--patience", "100"]);
    train(d.path(), "half", &["--epochs", "1", "--patience", "100"]);
    train(d.path(), "resumed", &["--epochs", "2", "--patience", "100", "--resume", "half/last.json"]);
    assert_eq!(read(d.path(), "full/last.json"), read(d.path(), "resumed/last.json"));
    assert_eq!(read(d.path(), "full/checkpoint.json"), read(d.path(), "resumed/checkpoint.json"));
}

#[test]
fn policy_solve_and_evaluate_round_trip() {
    let d = tempfile::tempdir().unwrap();
    tiny_corpus(d.path());
    train(d.path(), "run", &["--epochs", "1"]);
    for mode in ["greedy", "bok", "bok_2opt"] {
        let out = format!("{mode}.csv");
        ok(
            d.path(),
            &["solve", "--corpus", "tiny.jsonl", "--mode", mode, "--checkpoint", "run/checkpoint.json", "--k", "4", "--out", &out],
        );
    }
    ok(d.path(), &["solve", "--corpus", "tiny.jsonl", "--method", "warnsdorff,dfs_backtrack", "--out", "h.csv", "--routes", "h.jsonl"]);
    let report = ok(
        d.path(),
        &["evaluate", "--metrics", "h.csv", "greedy.csv", "bok.csv", "bok_2opt.csv", "--reference", "dfs_backtrack", "--json", "r.json"],
    );
    assert!(report.contains("reference: dfs_backtrack"));
    let json: serde_json::Value = serde_json::from_slice(&read(d.path(), "r.json")).unwrap();
    let methods = json["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 5);
    for m in methods {
        assert_eq!(m["instances"], 10);
    }

    let corpus = String::from_utf8(read(d.path(), "tiny.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    ok(d.path(), &["render", "--corpus", "tiny.jsonl", "--instance", id, "--routes", "h.jsonl", "--out", "p.svg"]);
    let svg = String::from_utf8(read(d.path(), "p.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn evaluate_rejects_an_absent_reference() {
    let d = tempfile::tempdir().unwrap();
    tiny_corpus(d.path());
    ok(d.path(), &["solve", "--corpus", "tiny.jsonl", "--method", "warnsdorff", "--out", "h.csv"]);
    let (code, _, _) = hexcover(d.path(), &["evaluate", "--metrics", "h.csv", "--reference", "stc_like"]);
    assert_ne!(code, 0);
}
