//! Drives the `flowplug` binary end to end on a small configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowplug::evaluation::EvalReport;
use flowplug::synthetic::read_dataset;

const SMALL: &str = r#"{
  "synthetic": {"num_identities": 8, "frames_per_identity": 5, "latent_dim": 8, "attributes": 2,
                "identity_dim": 3, "layers": 2, "attribute_kinds": ["binary", "continuous"]},
  "eval_data": {"num_identities": 4, "frames_per_identity": 3},
  "train": {"epochs": 3, "flow": {"couplings": 2, "hidden_width": 8, "hidden_layers": 1}},
  "probe": {"epochs": 10, "hidden": [8]},
  "edit": {"max_steps": 5}
}"#;

fn flowplug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowplug"))
        .args(args)
        .output()
        .expect("spawn flowplug")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = flowplug(&["transmogrify"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let o = flowplug(&["selftest"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("PASS")).count(),
        7,
        "{stdout}"
    );
}

#[test]
fn failures_are_reported_distinctly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = flowplug(&["train", "--out", path(dir.path())]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(stderr(&missing).contains("train.jsonl"));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let typo = flowplug(&[
        "gen-data",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert!(!typo.status.success());
    assert!(stderr(&typo).contains("epochz"), "{}", stderr(&typo));

    fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
    let invalid = flowplug(&[
        "gen-data",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(invalid.status.code(), Some(3));
    assert_ne!(stderr(&typo), stderr(&invalid));

    let flag = flowplug(&["train", "--bogus"]);
    assert_eq!(flag.status.code(), Some(2));
}

#[test]
fn pipeline_writes_reproducible_outputs_without_touching_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let common = ["--config", path(&cfg), "--out", path(&out), "--seed", "9"];
    for cmd in ["gen-data", "train", "evaluate"] {
        let mut args = vec![cmd];
        args.extend(common);
        let o = flowplug(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in [
        "train.jsonl",
        "train_truth.jsonl",
        "eval.jsonl",
        "eval_truth.jsonl",
        "config.json",
        "model.json",
        "loss.csv",
        "report.json",
        "accuracy.csv",
        "spearman.csv",
        "identity_drift.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let report_text = fs::read_to_string(out.join("report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&report_text).unwrap();
    assert_eq!(report.to_json(), report_text);
    assert_eq!(report.run["seed"], 9);
    let header = fs::read_to_string(out.join("accuracy.csv")).unwrap();
    assert!(header.starts_with("edited,attr_0,attr_1,acc_of_modif,not_converged"));

    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"format": "flowplug-edit-v1",
            "edits": [{"attr_index": 0, "target": -1.0, "mode": "step_search"}],
            "select": [{"identity_id": 0, "frame_id": 0}, {"identity_id": 1, "frame_id": 2}]}"#,
    )
    .unwrap();
    let data = out.join("eval.jsonl");
    let before = fs::read(&data).unwrap();
    let edit_out = dir.path().join("edit");
    let o = flowplug(&[
        "edit",
        "--config",
        path(&cfg),
        "--seed",
        "9",
        "--checkpoint",
        path(&out.join("model.json")),
        "--data",
        path(&data),
        "--spec",
        path(&spec),
        "--out",
        path(&edit_out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&data).unwrap(), before);
    let edited = read_dataset(&edit_out.join("edited.jsonl")).unwrap();
    assert_eq!(edited.stacks.len(), 2);
    let log = fs::read_to_string(edit_out.join("edit_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    // A second evaluation over the same inputs reproduces the report byte for byte.
    let again = dir.path().join("again");
    let o = flowplug(&[
        "evaluate",
        "--config",
        path(&cfg),
        "--seed",
        "9",
        "--checkpoint",
        path(&out.join("model.json")),
        "--train-data",
        path(&out.join("train.jsonl")),
        "--eval-data",
        path(&data),
        "--eval-truth",
        path(&out.join("eval_truth.jsonl")),
        "--out",
        path(&again),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(again.join("report.json")).unwrap(),
        report_text
    );
}
