use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const SYNTH: &str = r#"{"data": {"synth_preset": "synth-waterbirds"}}"#;

fn hsfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsfm"))
        .args(args)
        .env("HSFM_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run_ok(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = hsfm(&args);
    assert!(
        o.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("summary is JSON")
}

fn exit_code(cmd: &str, config: &Path, out: &Path) -> i32 {
    hsfm(&[
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .code()
    .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        assert_eq!(
            fs::read(a.join(n)).unwrap(),
            fs::read(b.join(n)).unwrap(),
            "{n} differs"
        );
    }
}

const HSFM_OUTPUTS: [&str; 5] = [
    "head.hsfh",
    "support.init",
    "support.opt",
    "trace.jsonl",
    "summary.json",
];

#[test]
fn gen_data_writes_hashed_manifest_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SYNTH);
    let m1 = run_ok("gen-data", &cfg, &dir.path().join("a"), &[]);
    let m2 = run_ok("gen-data", &cfg, &dir.path().join("b"), &[]);
    assert_eq!(m1, m2);
    for (split, rows) in [("train", 2100), ("val", 800), ("test", 800)] {
        let entry = &m1["files"][split];
        assert_eq!(entry["rows"], rows);
        let bytes = fs::read(dir.path().join("a").join(format!("{split}.hsfm"))).unwrap();
        assert_eq!(entry["sha256"], hex::encode(Sha256::digest(&bytes)));
    }
    assert_eq!(read_json(dir.path().join("a/manifest.json")), m1);

    let other = run_ok("gen-data", &cfg, &dir.path().join("c"), &["--seed", "7"]);
    assert_ne!(
        other["files"]["train"]["sha256"],
        m1["files"]["train"]["sha256"]
    );
    assert_eq!(other["synth"]["seed"], 7);
}

#[test]
fn erm_then_evaluate_on_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SYNTH);
    run_ok("gen-data", &cfg, &dir.path().join("data"), &[]);
    let files = write_config(
        dir.path(),
        "files.json",
        r#"{"data": {"files": {"train": "data/train.hsfm", "val": "data/val.hsfm", "test": "data/test.hsfm"}}}"#,
    );
    let report = run_ok("train-erm", &files, &dir.path().join("erm"), &[]);
    let synth_report = run_ok("train-erm", &cfg, &dir.path().join("erm2"), &[]);
    assert_eq!(report, synth_report);

    let eval_cfg = write_config(
        dir.path(),
        "e.json",
        r#"{"evaluate": {"head": "erm/head.hsfh", "data": "data/test.hsfm"}}"#,
    );
    let eval = run_ok("evaluate", &eval_cfg, &dir.path().join("ev"), &[]);
    assert_eq!(eval, report["test"]);
}

#[test]
fn train_hsfm_is_deterministic_and_its_config_echo_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SYNTH);
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    let summary = run_ok("train-hsfm", &cfg, &a, &[]);
    run_ok("train-hsfm", &cfg, &b, &[]);
    same_files(&a, &b, &HSFM_OUTPUTS);
    same_files(&a, &b, &["erm.hsfh", "config.json"]);

    run_ok("train-hsfm", &a.join("config.json"), &c, &[]);
    same_files(&a, &c, &HSFM_OUTPUTS);

    let trace = fs::read_to_string(a.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 10);
    assert!(
        summary["test"]["worst_group_accuracy"].as_f64().unwrap()
            > summary["start_test"]["worst_group_accuracy"]
                .as_f64()
                .unwrap()
    );
}

#[test]
fn one_value_sweep_reproduces_train_hsfm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"data": {"synth_preset": "synth-waterbirds"}, "sweep": {"axis": "T", "values": [10]}}"#,
    );
    run_ok("train-hsfm", &cfg, &dir.path().join("single"), &[]);
    let summary = run_ok(
        "sweep",
        &cfg,
        &dir.path().join("sweep"),
        &["--threads", "2"],
    );
    same_files(
        &dir.path().join("single"),
        &dir.path().join("sweep/T-10"),
        &HSFM_OUTPUTS,
    );
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("value,wga,avg_acc,status"));
    assert!(lines.next().unwrap().starts_with("10,"));
    assert_eq!(summary["points"][0]["status"], "ok");
}

#[test]
fn sweep_marks_failed_points_and_keeps_going() {
    let dir = tempfile::tempdir().unwrap();
    // An inner rate near f64::MAX overflows the logits at every point.
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"data": {"synth_preset": "synth-waterbirds"}, "hsfm": {"inner_lr": 1.7e308, "epochs": 1},
            "sweep": {"axis": "support_per_class", "values": [2, 4]}}"#,
    );
    let out = dir.path().join("sw");
    assert_eq!(exit_code("sweep", &cfg, &out), 2);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains("error")));
}

#[test]
fn presets_resolve_into_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"data": {"synth_preset": "synth-waterbirds"}}"#,
    );
    let out = dir.path().join("o");
    run_ok("gen-data", &cfg, &out, &["--preset", "waterbirds-resnet"]);
    let echo = read_json(out.join("config.json"));
    let h = &echo["hsfm"];
    assert_eq!(h["inner_steps"], 15);
    assert_eq!(h["inner_lr"], 5e-5);
    assert_eq!(h["outer_lr"], 1.0);
    assert_eq!(h["meta_steps"], 15);
    assert_eq!(h["k_hard"], 64);
    assert_eq!(h["epochs"], 40);
    assert_eq!(h["support_per_class"], 16);
    assert!(echo.get("preset").is_none());
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let unknown = write_config(
        dir.path(),
        "u.json",
        r#"{"data": {"synth_preset": "synth-waterbirds"}, "bogus": 1}"#,
    );
    assert_eq!(exit_code("train-erm", &unknown, &out), 1);
    let missing = write_config(
        dir.path(),
        "m.json",
        r#"{"data": {"files": {"train": "x", "val": "y", "test": "z"}}}"#,
    );
    assert_eq!(exit_code("train-erm", &missing, &out), 1);
    let no_data = write_config(dir.path(), "n.json", "{}");
    assert_eq!(exit_code("train-hsfm", &no_data, &out), 1);
    assert_eq!(
        exit_code("train-erm", &dir.path().join("absent.json"), &out),
        1
    );

    fs::write(
        dir.path().join("junk.hsfm"),
        b"JUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNK",
    )
    .unwrap();
    let junk = write_config(
        dir.path(),
        "j.json",
        r#"{"data": {"files": {"train": "junk.hsfm", "val": "junk.hsfm", "test": "junk.hsfm"}}}"#,
    );
    let o = hsfm(&[
        "train-erm",
        "--config",
        junk.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not an HSFM-FS file"));

    let diverge = write_config(
        dir.path(),
        "d.json",
        r#"{"data": {"synth_preset": "synth-waterbirds"}, "erm": {"steps": 5, "lr": 1e300}}"#,
    );
    assert_eq!(exit_code("train-erm", &diverge, &out), 2);

    let flip = write_config(
        dir.path(),
        "f.json",
        r#"{"check_grad": {"inject": "hvp-sign-flip"}}"#,
    );
    assert_eq!(exit_code("check-grad", &flip, &out), 2);
    let report = read_json(out.join("report.json"));
    assert_eq!(report["passed"], false);
    assert!(report["failed_cases"].as_u64().unwrap() > 0);
}

#[test]
fn check_grad_default_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", "{}");
    let report = run_ok("check-grad", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(report["passed"], true);
    assert_eq!(report["zero_unroll_exact"], true);
    assert_eq!(report["cases"].as_array().unwrap().len(), 20);
    assert!(report["descent"]
        .as_array()
        .unwrap()
        .iter()
        .all(|d| d["loss_after"].as_f64() < d["loss_before"].as_f64()));
}
