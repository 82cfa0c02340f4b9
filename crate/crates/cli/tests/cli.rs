use std::path::Path;
use std::process::{Command, Output};

fn laeids(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_laeids"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "laeids {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &str = r#"{
  "seed": 5,
  "data": {"kind": "synthetic", "synth": {"n_benign": 60, "n_malicious": 60, "payload_len": 64}},
  "image": {"height": 8, "width": 8, "source": "PAYLOAD_BYTES"},
  "pretrain": {"epochs": 2, "batch_size": 16, "hidden": [16, 8], "steps": 10},
  "selection": {"particles": 4, "epochs": 3},
  "sim": {"nodes": 3, "initial_nodes": 2, "steps": 8},
  "curve_fractions": []
}"#;

#[test]
fn staged_commands_then_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.json"), SMALL).unwrap();
    let base = ["--config", "small.json", "--out", "run"];
    for verb in [
        "synth",
        "pretrain",
        "select",
        "build-repo",
        "train",
        "simulate",
        "evaluate",
    ] {
        let mut args = base.to_vec();
        args.push(verb);
        laeids(&args, tmp.path());
    }
    let evaluated: serde_json::Value = {
        let mut args = base.to_vec();
        args.push("evaluate");
        serde_json::from_slice(&laeids(&args, tmp.path()).stdout).unwrap()
    };
    assert!(evaluated["accuracy"].as_f64().unwrap() > 0.5);

    let inspected: serde_json::Value =
        serde_json::from_slice(&laeids(&["model", "inspect", "run/models.laeb"], tmp.path()).stdout).unwrap();
    assert_eq!(inspected["classes"], serde_json::json!(["benign", "malicious"]));
    let tiers = inspected["pools"][0]["tiers"].as_array().unwrap();
    assert_eq!(tiers.len(), 3);

    let logged = std::fs::read_to_string(tmp.path().join("run/alerts.jsonl")).unwrap();
    let replayed = laeids(
        &[
            "--config",
            "small.json",
            "--out",
            "run",
            "simulate",
            "--scenario",
            "run/scenario.jsonl",
        ],
        tmp.path(),
    );
    assert_eq!(String::from_utf8(replayed.stdout).unwrap(), logged);
}

#[test]
fn run_then_replay_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.json"), SMALL).unwrap();
    laeids(&["--config", "small.json", "--out", "first", "run"], tmp.path());
    laeids(
        &["--out", "second", "replay", "--manifest", "first/manifest.json"],
        tmp.path(),
    );
    assert_eq!(
        std::fs::read(tmp.path().join("first/metrics.json")).unwrap(),
        std::fs::read(tmp.path().join("second/metrics.json")).unwrap()
    );
}

#[test]
fn remote_advisor_needs_nondeterministic_mode() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("remote.json"), r#"{"advisor": {"kind": "remote"}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_laeids"))
        .args(["--config", "remote.json", "run"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("deterministic"));
}
