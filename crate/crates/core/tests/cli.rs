use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn synergen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synergen")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SPEC: &str = r#"{"users": 10, "items": 120, "queries": 4, "events_per_user": 6, "item_dim": 8, "query_dim": 8}"#;

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, SPEC).unwrap();
    let out = dir.join(format!("data{seed}"));
    let res = synergen(&["synth", "--spec", spec.to_str().unwrap(), "--seed", &seed.to_string(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out
}

fn write_config(dir: &Path, data: &Path, steps: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "model": {"layers": 1, "d_model": 16, "heads": 2, "mlp_hidden": 16, "items": 120, "queries": 4,
                  "item_semantic_dim": 8, "query_dim": 8, "item_collab_dim": 8, "action_dim": 4},
        "train": {"batch_size": 4, "steps": steps, "record_wall_time": false},
        "data": {"events": data.join("events.jsonl"), "semantic_dir": data},
        "output_dir": dir.join("run"),
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn synth_is_a_function_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 1);
    let b = dir.path().join("again");
    std::fs::rename(&a, &b).unwrap();
    let a = synth(dir.path(), 1);
    let c = synth(dir.path(), 2);
    for f in ["events.jsonl", "item_semantic.sgem", "query_semantic.sgem"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("events.jsonl")).unwrap(), std::fs::read(c.join("events.jsonl")).unwrap());
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_gradient() {
    assert_eq!(code(&synergen(&["gradcheck", "--seed", "1"])), 0);
    assert_eq!(code(&synergen(&["gradcheck", "--seed", "1", "--corrupt-gradient"])), 1);
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&synergen(&["train"])), 2);
    assert_eq!(code(&synergen(&["no-such-command"])), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    let out = synergen(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn train_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4);
    let cfg = write_config(dir.path(), &data, 4);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&synergen(&["train", "--config", cfg])), 0);
    let ck = dir.path().join("run/checkpoint.sgck");
    let first = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 4);

    let resumed = dir.path().join("resumed");
    let out = synergen(&[
        "train", "--config", cfg, "--resume", ck.to_str().unwrap(), "--steps", "6", "--output-dir", resumed.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![5, 6]);

    let report = dir.path().join("report.json");
    let out = synergen(&[
        "eval", "--checkpoint", ck.to_str().unwrap(), "--protocol", "pool100", "--seeds", "2", "--report", report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["per_seed"].as_array().unwrap().len(), 2);
    let r10 = rep["mean"]["recall"]["10"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r10));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pool100"));

    let refused = synergen(&["eval", "--checkpoint", ck.to_str().unwrap(), "--task", "ranking", "--protocol", "full"]);
    assert_eq!(code(&refused), 2);
}

#[test]
fn inspect_mask_prints_the_context_mask() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let events = data.join("events.jsonl");
    let out = synergen(&["inspect-mask", "--events", events.to_str().unwrap(), "--session", "u0"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Context") && text.contains("t="));
    assert_eq!(code(&synergen(&["inspect-mask", "--events", events.to_str().unwrap(), "--session", "nobody"])), 2);
}
