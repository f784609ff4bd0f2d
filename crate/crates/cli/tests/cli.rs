use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mapo-lab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A configuration small enough to train in well under a second.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "task": {"preset": "style"},
        "model": {"hidden": [8], "timesteps": 16},
        "pretrain": {"steps": 40, "batch_size": 16, "dataset_size": 256},
        "data": {"size": 64},
        "train": {
            "objective": {"kind": "mapo", "beta": 8.0},
            "steps": 20,
            "batch_size": 16,
            "seed": 3,
            "record_timing": false
        },
        "eval": {"samples": 64, "seed": 1}
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn output_hash(manifest: &Value, file: &str) -> String {
    manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["path"].as_str().unwrap().ends_with(file))
        .unwrap_or_else(|| panic!("{file} missing from manifest"))["sha256"]
        .as_str()
        .unwrap()
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(cfg: &Path, out: &Path) {
    let o = run(&["pretrain", "--config", s(cfg), "--out", s(out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn dry_run_prints_resolved_config_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("out");
    let o = run(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--set",
        "train.lr=0.0005",
        "--dry-run",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed["train"]["lr"], json!(0.0005));
    assert_eq!(printed["train"]["objective"]["beta_dpo"], json!(500.0));
    assert!(!out.exists());
}

#[test]
fn missing_field_exits_with_config_code_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"model": {"hidden": [8]}}"#).unwrap();
    let o = run(&["pretrain", "--config", s(&path), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));

    let o = run(&["pretrain", "--set", "train.objective.kind=ppo", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.objective.kind"), "{}", stderr(&o));

    let o = run(&["pretrain", "--set", "train.steps=0", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pretrain(&cfg, &a);
    pretrain(&cfg, &b);
    let (ma, mb) = (manifest(&a), manifest(&b));
    for file in ["base.ckpt", "steps.csv"] {
        assert_eq!(output_hash(&ma, file), output_hash(&mb, file));
    }
    assert_eq!(ma["command"], "pretrain");
    assert_eq!(ma["seeds"], json!([3]));
    assert!(ma["summary"]["test_mse"].as_f64().unwrap() > 0.0);
    assert_eq!(ma["inputs"][0]["sha256"], mb["inputs"][0]["sha256"]);
}

#[test]
fn full_lifecycle_with_reference_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let base_dir = tmp.path().join("base");
    pretrain(&cfg, &base_dir);
    let base = base_dir.join("base.ckpt");

    // Rejected samples come from the base model by default, which needs --init.
    let data_dir = tmp.path().join("data");
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&data_dir)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&[
        "gen-data", "--config", s(&cfg), "--init", s(&base), "--json", "--out", s(&data_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&data_dir);
    assert_eq!(m["summary"]["pairs"], json!(64));
    assert!(m["summary"]["valid_fraction"].as_f64().unwrap() >= 0.95);
    assert!(data_dir.join("dataset.json").exists());
    let dataset = data_dir.join("dataset.bin");

    let dpo_dir = tmp.path().join("dpo");
    let o = run(&[
        "align", "--config", s(&cfg), "--objective", "dpo", "--dataset", s(&dataset), "--out",
        s(&dpo_dir),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reference"), "{}", stderr(&o));
    assert!(!dpo_dir.exists());
    let o = run(&[
        "align", "--config", s(&cfg), "--objective", "dpo", "--beta", "250", "--dataset",
        s(&dataset), "--init", s(&base), "--out", s(&dpo_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&dpo_dir)["config"]["train"]["objective"]["beta_dpo"], json!(250.0));

    let mapo_dir = tmp.path().join("mapo");
    let o = run(&[
        "align", "--config", s(&cfg), "--objective", "mapo", "--dataset", s(&dataset), "--init",
        s(&base), "--out", s(&mapo_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let ckpt = mapo_dir.join("checkpoint.ckpt");
    assert!(ckpt.exists() && mapo_dir.join("steps.csv").exists());

    let eval = |dir: &Path| {
        let o = run(&[
            "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--n", "64", "--seed", "5",
            "--out", s(dir),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(dir.join("metrics.csv")).unwrap()
    };
    let e1 = eval(&tmp.path().join("e1"));
    let e2 = eval(&tmp.path().join("e2"));
    assert_eq!(e1, e2);
    let text = String::from_utf8(e1).unwrap();
    assert!(text.starts_with("mismatch,mean_oracle_reward,win_rate_vs_base,target_mass,n,seed,wall_time_s"));

    let broken = tmp.path().join("broken.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&broken, bytes).unwrap();
    let o = run(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&broken), "--out", s(&tmp.path().join("e3")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn diverging_run_exits_with_runtime_code_and_keeps_last_good() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data_dir = tmp.path().join("data");
    let o = run(&[
        "gen-data", "--config", s(&cfg), "--set", "data.rejected=mixture", "--out", s(&data_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("nan");
    let o = run(&[
        "align", "--config", s(&cfg), "--set", "train.lr=1e300", "--dataset",
        s(&data_dir.join("dataset.bin")), "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(out.join("last_good.ckpt").exists());
}

#[test]
fn degenerate_sweep_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = run(&["sweep", "--config", s(&cfg), "--jobs", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 2, "{results}");
    assert!(results.lines().nth(1).unwrap().ends_with(",ok"));

    let rep = tmp.path().join("report");
    let o = run(&["report", s(&out.join("results.csv")), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["summary.csv", "score_vs_dataset_size.svg"] {
        assert_eq!(fs::read(out.join(file)).unwrap(), fs::read(rep.join(file)).unwrap());
    }
    let rep2 = tmp.path().join("report2");
    let o = run(&["report", s(&out.join("results.csv")), "--out", s(&rep2)]);
    assert!(o.status.success());
    assert_eq!(
        output_hash(&manifest(&rep), "summary.csv"),
        output_hash(&manifest(&rep2), "summary.csv")
    );

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, results.replacen("status", "status,notes", 1)).unwrap();
    let o = run(&["report", s(&bad), "--out", s(&tmp.path().join("r3"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("notes"), "{}", stderr(&o));
}

#[test]
fn shipped_presets_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let o = run(&["sweep", "--config", s(&path), "--dry-run"]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
        count += 1;
    }
    assert_eq!(count, 8);
}
