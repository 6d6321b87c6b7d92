use std::path::Path;
use std::process::{Command, Output};

fn rtatl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtatl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RTATL_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning rtatl")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn synth_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&rtatl(&["synth", "--out", "data", "--subjects", "3", "--frames", "4"], d));
    assert!(d.join("data/labeled/manifest.csv").exists());
    assert!(d.join("data/run.json").exists());

    let table = ok(&rtatl(
        &["train", "--config", "synthetic", "--labeled", "data/labeled/manifest.csv", "--epochs", "1", "--fold", "0", "--out", "run"],
        d,
    ));
    for f in ["run.json", "config.cfg", "metrics.csv", "epochs.csv", "model.safetensors", "fold.json", "fold_f1.csv"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let aus = 5;
    assert_eq!(table.trim().lines().count(), 1 + aus + 1);

    let table = ok(&rtatl(&["eval", "--checkpoint", "run/model.safetensors", "--labeled", "data/labeled/manifest.csv"], d));
    let lines: Vec<&str> = table.trim().lines().collect();
    assert_eq!(lines.len(), 1 + aus + 1);
    assert!(lines.last().unwrap().starts_with("Avg"));

    let json = ok(&rtatl(
        &["eval", "--checkpoint", "run/model.safetensors", "--labeled", "data/labeled/manifest.csv", "--json", "--out", "ev"],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["per_au"].as_array().unwrap().len(), aus);
    assert_eq!(v["samples"].as_u64().unwrap(), 12);
    for f in ["eval.csv", "eval.json", "run.json"] {
        assert!(d.join("ev").join(f).exists(), "{f} missing");
    }

    let refused = rtatl(
        &["eval", "--checkpoint", "run/model.safetensors", "--labeled", "data/labeled/manifest.csv", "--config", "bp4d"],
        d,
    );
    assert_eq!(refused.status.code(), Some(3));

    for (cmd, file) in [("viz-flow", "flow.png"), ("viz-inpaint", "inpaint.png"), ("viz-relations", "relations.png")] {
        let mut args = vec![cmd, "--checkpoint", "run/model.safetensors", "--out", "viz"];
        if cmd != "viz-relations" {
            args.extend(["--labeled", "data/labeled/manifest.csv", "--count", "2"]);
        }
        ok(&rtatl(&args, d));
        assert!(d.join("viz").join(file).exists(), "{file} missing");
    }
    assert!(d.join("viz/relations.csv").exists());
}

#[test]
fn missing_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtatl(&["train", "--config", "synthetic", "--labeled", "nope.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));

    let out = Command::new(env!("CARGO_BIN_EXE_rtatl"))
        .args(["train", "--config", "synthetic", "--labeled", "nope.csv"])
        .current_dir(dir.path())
        .env("RTATL_DATA_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtatl(&["train", "--config", "nosuch", "--dry-run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&rtatl(&["train", "--config", "synthetic", "--dry-run"], dir.path()));
    assert!(out.starts_with("config ok"));
    assert_eq!(out.lines().count(), 3);
}
