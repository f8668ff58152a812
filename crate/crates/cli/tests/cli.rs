use std::path::Path;
use std::process::{Command, Output};

fn cct(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cct"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn cct")
}

const TINY: &str = r#"{
  "model": {"d": 16, "heads": 2, "d_ff": 32, "enc_layers": 1, "dec_layers": 1},
  "train": {"steps": 12, "batch_size": 4, "warmup_steps": 4, "eval_every": 6, "eval_batches": 1},
  "budgets": [[1.0, 1.0], [0.5, 0.5], [0.2, 0.2], [1.0, 0.2]],
  "noise": {"alpha_max": 5.0, "ramp_steps": 12}
}"#;

fn trained(dir: &Path) {
    std::fs::write(dir.join("cfg.json"), TINY).unwrap();
    let out = cct(&["train", "--config", "cfg.json", "--out", "run"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let run = dir.path().join("run");
    assert!(run.join("checkpoint.cct").is_file());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let steps = lines.iter().filter(|v| v.get("loss").is_some()).count();
    let evals = lines.iter().filter(|v| v.get("eval").is_some()).count();
    assert_eq!(steps, 12);
    assert_eq!(evals, 2 * 4);
    assert_eq!(lines[0]["alpha"], 0.0);
}

#[test]
fn eval_emits_counter_json() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = cct(
        &["eval", "--checkpoint", "run/checkpoint.cct", "--config", "cfg.json", "--symbol", "3", "--mode", "discrete", "--batches", "1", "--batch-size", "4"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["symbol"], 3);
    let f = v["fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));
    for c in v["components"].as_array().unwrap() {
        assert!((0.0..=1.0).contains(&c["fraction"].as_f64().unwrap()));
    }
    let total = v["executed"].as_f64().unwrap() / v["available"].as_f64().unwrap();
    assert_eq!(total, f);
}

#[test]
fn decode_trace_feeds_the_analyses() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let d = dir.path();
    std::fs::write(d.join("corpus.txt"), "1 5 6 7 2\t1 7 6 5 2\n1 9 9 2\t1 9 9 2\n").unwrap();
    let out = cct(
        &["decode", "--checkpoint", "run/checkpoint.cct", "--symbol", "1", "--input", "corpus.txt", "--trace", "t.csv"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let out = cct(&["analyze", "compute-spread", "--trace", "t.csv", "--bins", "20", "--out", "spread.csv"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("spread.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("spread.json")).unwrap()).unwrap();
    assert_eq!(meta["kind"], "compute-spread");
    assert_eq!(meta["symbol"], 1);

    for kind in ["layer-activation", "attn-by-timestep"] {
        let out = cct(&["analyze", kind, "--trace", "t.csv"], d);
        assert!(out.status.success(), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.len() > 20);
    }
    let out = cct(&["analyze", "freq-vs-compute", "--trace", "t.csv", "--corpus", "corpus.txt"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Reports are pure functions of the trace.
    let again = cct(&["analyze", "compute-spread", "--trace", "t.csv", "--out", "spread2.csv"], d);
    assert!(again.status.success());
    assert_eq!(std::fs::read(d.join("spread.csv")).unwrap(), std::fs::read(d.join("spread2.csv")).unwrap());
    assert_eq!(std::fs::read(d.join("spread.json")).unwrap(), std::fs::read(d.join("spread2.json")).unwrap());
}

#[test]
fn tradeoff_and_cost_model() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = cct(
        &["analyze", "tradeoff-curve", "--checkpoint", "run/checkpoint.cct", "--config", "cfg.json", "--batches", "1", "--batch-size", "4"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1 + 4);

    let out = cct(&["cost-model", "--config", "cfg.json"], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!v["gates"].as_array().unwrap().is_empty());
}

#[test]
fn bad_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"lambda": -1.0}}"#).unwrap();
    let out = cct(&["train", "--config", "bad.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lambda"));

    std::fs::write(dir.path().join("bad.json"), r#"{"model": {"heads": "four"}}"#).unwrap();
    let out = cct(&["train", "--config", "bad.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.heads"));
}

#[test]
fn missing_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = cct(&["train", "--config", "absent.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = cct(&["analyze", "layer-activation", "--trace", "absent.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
