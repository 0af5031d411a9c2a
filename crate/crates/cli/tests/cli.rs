use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcam::metrics::{broadcast_rows, dr_acc};
use dcam::nn::load_model;
use dcam::synth::import_dataset;
use serde_json::Value;

fn dcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcam")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dcam(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "dcam {args:?} failed:\n{stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path, name: &str, dims: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "gen-data",
        "--out",
        s(&out),
        "--dims",
        &dims.to_string(),
        "--len",
        "48",
        "--pattern-length",
        "12",
        "--injected-dims",
        "1",
        "--instances-per-class",
        "10",
        "--test-instances-per-class",
        "3",
        "--seed",
        &seed.to_string(),
    ]);
    out
}

fn small_model(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "train",
        "--out",
        s(&out),
        "--dataset",
        s(data),
        "--arch",
        "dcnn",
        "--filters",
        "4,4",
        "--epochs",
        "2",
    ]);
    out.join("model.bin")
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_writes_manifest_instances_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let stderr = ok(&[
        "gen-data",
        "--out",
        s(&out),
        "--instances-per-class",
        "5",
        "--test-instances-per-class",
        "0",
    ]);
    assert!(stderr.contains("D=10 n=400"), "{stderr}");
    assert!(stderr.contains("mask prevalence"), "{stderr}");
    let names: Vec<String> = dir_contents(&out).into_iter().map(|(n, _)| n).collect();
    let instances = names
        .iter()
        .filter(|n| n.starts_with("instance_") && !n.ends_with(".mask.csv"))
        .count();
    assert_eq!(instances, 10);
    assert!(names.contains(&"manifest.json".to_string()));
    assert_eq!(json(&out.join("config.json"))["instances_per_class"], 5);
}

#[test]
fn same_seed_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_dataset(tmp.path(), "a", 3, 7);
    let b = small_dataset(tmp.path(), "b", 3, 7);
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn invalid_pattern_length_fails_without_leaving_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let res = dcam(&["gen-data", "--out", s(&out), "--len", "32", "--pattern-length", "32"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("pattern_length"));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"dims": 3, "len": 40, "pattern_length": 12, "injected_dimension_count": 1, "instances_per_class": 4}"#,
    )
    .unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--len", "50"]);
    let resolved = json(&out.join("config.json"));
    assert_eq!(resolved["dims"], 3);
    assert_eq!(resolved["len"], 50);
    assert_eq!(import_dataset(&out).unwrap().len(), 50);
}

#[test]
fn non_empty_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    assert!(!dcam(&["gen-data", "--out", s(&out)]).status.success());
    assert_eq!(fs::read_to_string(out.join("keep.txt")).unwrap(), "x");
}

#[test]
fn train_writes_model_log_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "data", 3, 1);
    let model = small_model(tmp.path(), &data, "run");
    let run = model.parent().unwrap();
    let log = fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let report = json(&run.join("train_report.json"));
    assert!(report["val_acc"].as_f64().unwrap() >= 0.0);
    assert_eq!(json(&run.join("config.json"))["arch"], "dCNN");
    assert_eq!(load_model(&model).unwrap().dims(), 3);

    let resumed = tmp.path().join("resumed");
    ok(&[
        "train",
        "--out",
        s(&resumed),
        "--dataset",
        s(&data),
        "--resume",
        s(&model),
        "--epochs",
        "1",
    ]);
    assert!(resumed.join("model.bin").exists());
}

#[test]
fn unknown_architecture_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "data", 2, 1);
    let out = tmp.path().join("run");
    let res = dcam(&["train", "--out", s(&out), "--dataset", s(&data), "--arch", "lstm"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown architecture"));
    assert!(!out.exists());
}

#[test]
fn explain_is_deterministic_and_reports_ng() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "data", 3, 2);
    let model = small_model(tmp.path(), &data, "run");
    let explain = |name: &str, k: &str, workers: &str| {
        let out = tmp.path().join(name);
        let stderr = ok(&[
            "explain",
            "--out",
            s(&out),
            "--model",
            s(&model),
            "--dataset",
            s(&data),
            "--index",
            "1",
            "--k",
            k,
            "--workers",
            workers,
        ]);
        (out, stderr)
    };
    let (one, stderr) = explain("k1", "1", "1");
    assert!(stderr.contains("n_g/k"), "{stderr}");
    let csv = fs::read_to_string(one.join("dcam.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().all(|l| l.split(',').count() == 48));
    assert!(fs::read(one.join("dcam.ppm")).unwrap().starts_with(b"P6\n48 24\n255\n"));
    assert_eq!(json(&one.join("dcam.json"))["k"], 1);

    let (a, _) = explain("a", "12", "1");
    let (b, _) = explain("b", "12", "3");
    assert_eq!(
        fs::read(a.join("dcam.csv")).unwrap(),
        fs::read(b.join("dcam.csv")).unwrap()
    );
}

#[test]
fn single_dimension_explanation_is_zero_with_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "data", 1, 3);
    let model = small_model(tmp.path(), &data, "run");
    let out = tmp.path().join("explain");
    let stderr = ok(&[
        "explain",
        "--out",
        s(&out),
        "--model",
        s(&model),
        "--dataset",
        s(&data),
        "--index",
        "0",
        "--k",
        "3",
    ]);
    assert!(stderr.contains("warning"), "{stderr}");
    let csv = fs::read_to_string(out.join("dcam.csv")).unwrap();
    assert!(csv.trim().split(',').all(|v| v.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn eval_cam_on_dcnn_scores_the_broadcast_map() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = small_dataset(tmp.path(), "data", 3, 4);
    let model_path = small_model(tmp.path(), &data_dir, "run");
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--out",
        s(&out),
        "--model",
        s(&model_path),
        "--dataset",
        s(&data_dir),
        "--method",
        "cam",
    ]);
    let report = json(&out.join("report.json"));

    let model = load_model(&model_path).unwrap();
    let data = import_dataset(&data_dir).unwrap();
    let instances = report["instances"].as_array().unwrap();
    assert_eq!(instances.len(), 3);
    for inst in instances {
        let s = &data.series[inst["index"].as_u64().unwrap() as usize];
        assert_eq!(s.label(), Some(1));
        let cam = dcam::cam::compute_series_cam(&model, s, 1).unwrap();
        let row: Vec<f64> = (0..cam.len)
            .map(|t| (0..cam.rows).map(|r| cam.row(r)[t]).sum::<f64>() / cam.rows as f64)
            .collect();
        let expected = dr_acc(&broadcast_rows(&row, 3), s.mask().unwrap()).unwrap();
        assert!((inst["dr_acc"].as_f64().unwrap() - expected).abs() < 1e-12);
        let prevalence = s.positive_cells() as f64 / (3.0 * 48.0);
        assert!((inst["random_baseline"].as_f64().unwrap() - prevalence).abs() < 1e-12);
    }
    assert!(out.join("pr").read_dir().unwrap().count() == 3);
}

#[test]
fn eval_dcam_reports_ng_and_ccam_needs_ccnn() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "data", 3, 5);
    let model = small_model(tmp.path(), &data, "run");
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--out",
        s(&out),
        "--model",
        s(&model),
        "--dataset",
        s(&data),
        "--k",
        "4",
        "--limit",
        "2",
    ]);
    let report = json(&out.join("report.json"));
    assert_eq!(report["method"], "dcam");
    assert_eq!(report["instances"].as_array().unwrap().len(), 2);
    assert!(report["ng_ratio"]["median"].is_number());

    let bad = tmp.path().join("bad");
    let res = dcam(&[
        "eval",
        "--out",
        s(&bad),
        "--model",
        s(&model),
        "--dataset",
        s(&data),
        "--method",
        "ccam",
    ]);
    assert!(!res.status.success());
    assert!(!bad.exists());
}

#[test]
fn missing_mask_is_an_explicit_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "data", 2, 6);
    let model = small_model(tmp.path(), &data, "run");
    let mask = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with(".mask.csv"))
        .unwrap();
    fs::remove_file(&mask).unwrap();
    let res = dcam(&[
        "eval",
        "--out",
        s(&tmp.path().join("eval")),
        "--model",
        s(&model),
        "--dataset",
        s(&data),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("mask"));
}

#[test]
fn bench_writes_timings() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    ok(&[
        "bench",
        "--out",
        s(&out),
        "--dims",
        "2",
        "--len",
        "8",
        "--k",
        "2",
        "--repeats",
        "2",
        "--filters",
        "2",
        "--kernel-width",
        "3",
    ]);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sweep,dims,len,k,repeat,seconds");
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(json(&out.join("ratios.json"))["k"].is_number());
}
