use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dap(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dap"))
        .args(args)
        .env("DAP_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const CONFIG: &str = r#"{
  "seed": 3,
  "dataset": {"kind": "gaussian", "num_classes": 3, "dim": 5, "n_per_class": 40, "class_separation": 1.2},
  "defense": {"kind": "dap_t", "r": 0.2},
  "model": {"hidden": [16]},
  "train": {"max_epochs": 5, "patience": 5},
  "attack": {
    "num_shadows": 2,
    "shadow_train": {"max_epochs": 3, "patience": 3},
    "discriminator_width": 8,
    "discriminator_blocks": 1,
    "discriminator_train": {"max_epochs": 2, "patience": 2}
  },
  "output_dir": "toy"
}"#;

#[test]
fn verify_reports_table_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("lambda.csv");
    let out = dap(dir.path(), &["verify-paper-aop", "--lambda-sweep", sweep.to_str().unwrap()]);
    let stdout = text(&out.stdout);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout.lines().last().unwrap().starts_with("FAIL"));
    assert!(stdout.contains("Cinic-10/dap_t"));
    let lines = fs::read_to_string(&sweep).unwrap();
    assert_eq!(lines.lines().count(), 65);
}

#[test]
fn train_evaluate_attack_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let root = dir.path().join("runs");

    let out = dap(&root, &["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("dataset,defense,seed,acc"));
    assert!(stdout.lines().nth(1).unwrap().starts_with("gaussian,dap_t,3,"));

    let run = root.join("toy");
    for f in ["model.json", "discriminator.json", "summary.json", "result.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let out = dap(&root, &["evaluate", "--run", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["aop"].as_array().unwrap().len(), 4);
    let row = text(&out.stdout);
    let acc = v["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc), "{row}");

    for kind in ["loss", "discriminator"] {
        let out = dap(&root, &["attack", "--run", run.to_str().unwrap(), "--kind", kind]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v["all"]["auc"].as_f64().is_some());
    }

    let out = dap(&root, &["report", "--format", "markdown", "--metric", "acc"]);
    assert!(out.status.success());
    let md = text(&out.stdout);
    assert!(md.lines().next().unwrap().contains("dap_t"));
    assert!(md.contains("gaussian"));
}

#[test]
fn sweep_writes_flagged_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let table = dir.path().join("sweep.csv");
    let out = dap(
        &dir.path().join("runs"),
        &["sweep-r", "--config", cfg.to_str().unwrap(), "--grid", "0,0.5", "--out", table.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let t = fs::read_to_string(&table).unwrap();
    assert_eq!(t.lines().count(), 3);
    assert_eq!(t.lines().filter(|l| l.contains(",true,")).count(), 1);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"dataset": {"kind": "gaussian"}}"#).unwrap();
    let out = dap(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("error"));

    let out = dap(dir.path(), &["train", "--config", "/nonexistent/cfg.json"]);
    assert!(!out.status.success());

    let out = dap(dir.path(), &["evaluate", "--run", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}
