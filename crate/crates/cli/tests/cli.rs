use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn restcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_restcal"))
        .args(args)
        .env("RESTCAL_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "schema": "restcal-run/1",
  "synth": {"n_subjects": 3, "trials_per_class": 4, "rs_trials_per_subject": 2},
  "train": {"epochs": 2, "batch_size": 8},
  "calib": {"steps": 3},
  "adapt": {"epochs": 1},
  "sweep_fractions": [0.5, 1.0],
  "output": "out",
  "seed": 7
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn missing_config_exits_1_with_path() {
    let o = restcal(&["pipeline", "--config", "/no/such/dir/run.json", "--target", "S1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/no/such/dir/run.json"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"calib": {"gamma3": 2, "gamma2": -1}}"#);
    let o = restcal(&["train", "--config", cfg.to_str().unwrap(), "--target", "S1"]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("calib.gamma3"), "{e}");
    assert!(e.contains("gamma2"), "{e}");
}

#[test]
fn bad_arguments_exit_1() {
    let o = restcal(&["pipeline"]);
    assert_eq!(code(&o), 1);
    let o = restcal(&["frobnicate"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn help_exits_0() {
    let o = restcal(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for cmd in [
        "synth",
        "train",
        "calibrate",
        "adapt",
        "eval",
        "pipeline",
        "sweep",
        "export-features",
        "gradcheck",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn gradcheck_passes() {
    let o = restcal(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative gradient error"));
}

#[test]
fn gradcheck_fails_with_exit_3_when_tolerance_is_impossible() {
    let o = restcal(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
}

#[test]
fn unknown_target_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = restcal(&["train", "--config", cfg.to_str().unwrap(), "--target", "S9"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("S9"));
}

#[test]
fn missing_dataset_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"dataset": "nowhere"}"#);
    let o = restcal(&["train", "--config", cfg.to_str().unwrap(), "--target", "S1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn corrupt_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("data")).unwrap();
    fs::write(dir.path().join("data/manifest.json"), "{ not json").unwrap();
    let cfg = write_config(dir.path(), r#"{"dataset": "data"}"#);
    let o = restcal(&["train", "--config", cfg.to_str().unwrap(), "--target", "S1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn pipeline_writes_report_for_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = restcal(&["pipeline", "--config", cfg.to_str().unwrap(), "--target", "S1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("S1"));
    let out = dir.path().join("out");
    for f in [
        "config.json",
        "report.json",
        "report.tsv",
        "report.txt",
        "S1/stage1.ckpt",
        "S1/adapted.ckpt",
        "S1/history.jsonl",
        "S1/audit.json",
        "S1/calibrated/manifest.json",
        "S1/calibrated/provenance.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["subjects"][0]["subject"], "S1");
    assert_eq!(report["seed"], 7);
    let acc = report["subjects"][0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let snapshot: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["train"]["seed"], 10);
    assert_eq!(snapshot["calib"]["gamma2"], 10.0);
    let audit: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("S1/audit.json")).unwrap()).unwrap();
    assert_eq!(audit["target_reads"], 0);
    assert_eq!(audit["subjects_read"], serde_json::json!(["S2", "S3"]));
}

// the output directory is the one field --out is meant to change
fn report_without_output(out: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    v["config"]["output"] = serde_json::Value::Null;
    v
}

#[test]
fn snapshot_reruns_to_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = restcal(&["pipeline", "--config", cfg.to_str().unwrap(), "--target", "S2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = report_without_output(&dir.path().join("out"));
    let ckpt = fs::read(dir.path().join("out/S2/adapted.ckpt")).unwrap();
    let snap = dir.path().join("out/config.json");
    let o = restcal(&[
        "pipeline",
        "--config",
        snap.to_str().unwrap(),
        "--target",
        "S2",
        "--out",
        dir.path().join("again").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(first, report_without_output(&dir.path().join("again")));
    assert_eq!(ckpt, fs::read(dir.path().join("again/S2/adapted.ckpt")).unwrap());
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    for stage in ["synth", "train", "calibrate", "adapt", "eval", "export-features", "sweep"] {
        let o = restcal(&[stage, "--config", c, "--target", "S3"]);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    assert!(out.join("data/manifest.json").is_file());
    assert!(out.join("S3/result.json").is_file());
    assert!(out.join("report.tsv").is_file());
    let features = fs::read_to_string(out.join("S3/features.tsv")).unwrap();
    assert!(features.starts_with("id\tsubject\tclass\tsource\tmethod"));
    let sweep = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn calibrate_without_stage1_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = restcal(&["calibrate", "--config", cfg.to_str().unwrap(), "--target", "S1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
