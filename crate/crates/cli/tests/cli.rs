// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn carla(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carla"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn carla")
}

const TINY: &[&str] = &[
    "--window-size",
    "16",
    "--stride",
    "4",
    "--pretext-epochs",
    "2",
    "--selfsup-epochs",
    "2",
    "--set",
    "encoder.channels=[4,8]",
    "--set",
    "encoder.rep_dim=8",
    "--set",
    "selfsup.classes=3",
    "--deterministic",
];

fn synth(dir: &Path) {
    let out = carla(
        &["synth", "--out", "data", "--entities", "2", "--length", "300", "--dims", "2", "--seed", "4"],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

fn metric(report: &serde_json::Value, key: &str) -> f64 {
    report["pooled"][key].as_f64().unwrap()
}

#[test]
fn deterministic_pipeline_reproduces_report() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    for out in ["a", "b"] {
        let o = carla(&with_tiny(&["pipeline", "--data", "data", "--out", out]), tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(tmp.path().join(d).join("report.json")).unwrap()).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    for key in ["f1", "precision", "recall"] {
        assert!((metric(&a, key) - metric(&b, key)).abs() <= 1e-6);
    }
    assert!((a["aupr_mean"].as_f64().unwrap() - b["aupr_mean"].as_f64().unwrap()).abs() <= 1e-6);
    assert!(tmp.path().join("a/manifest.json").exists());
    assert!(tmp.path().join("a/entity-1/scores.csv").exists());
}

#[test]
fn staged_training_then_detect_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let dir = tmp.path();
    let o = carla(&with_tiny(&["train", "--stage", "pretext", "--data", "data", "--out", "run"]), dir);
    assert!(o.status.success());
    assert!(dir.join("run/entity-0/pretext/neighbors.json").exists());
    assert!(!dir.join("run/entity-0/selfsup").exists());
    assert!(!dir.join("run/report.json").exists());

    let o = carla(&with_tiny(&["train", "--stage", "selfsup", "--data", "data", "--out", "run"]), dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained = fs::read_to_string(dir.join("run/entity-0/scores.csv")).unwrap();

    let o = carla(&with_tiny(&["detect", "--data", "data", "--out", "run"]), dir);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.join("run/entity-0/scores.csv")).unwrap(), trained);
    let labels = fs::read_to_string(dir.join("run/entity-0/labels.csv")).unwrap();
    assert!(labels.starts_with("index,label\n"));
    assert_eq!(labels.lines().count(), 301);

    let o = carla(&["eval", "--data", "data", "--run", "run", "--out", "ev", "--baseline-seed", "1"], dir);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(dir.join("ev/report.json")).unwrap(),
        fs::read_to_string(dir.join("run/report.json")).unwrap()
    );
    assert!(dir.join("ev/baseline/report.md").exists());

    let o = carla(&["report", "ev", "--compare", "ev/baseline"], dir);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("| **pooled** |"));
}

#[test]
fn inject_preview_writes_csv_and_spec() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = carla(
        &["inject-preview", "--data", "data", "--window-size", "32", "--index", "5", "--out", "prev"],
        tmp.path(),
    );
    assert!(o.status.success());
    let csv = fs::read_to_string(tmp.path().join("prev/preview.csv")).unwrap();
    assert!(csv.starts_with("t,w_0,injected_0,w_1,injected_1\n"));
    assert_eq!(csv.lines().count(), 33);
    let spec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("prev/spec.json")).unwrap()).unwrap();
    assert!(spec["start"].as_u64().unwrap() <= spec["end"].as_u64().unwrap());
    assert!(!spec["injections"].as_array().unwrap().is_empty());
}

#[test]
fn ablation_writes_one_run_per_switch() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = carla(
        &with_tiny(&[
            "ablate",
            "--data",
            "data",
            "--out",
            "abl",
            "--switch",
            "loss:no-entropy",
            "--switch",
            "positive:noise",
        ]),
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(tmp.path().join("abl/ablation.md")).unwrap();
    assert!(table.contains("| full |"));
    assert!(table.contains("| loss:no-entropy |"));
    assert!(table.contains("| positive:noise |"));
    let noise = fs::read_to_string(tmp.path().join("abl/positive_noise/config.toml")).unwrap();
    assert!(noise.contains("sigma = 0.01"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let dir = tmp.path();

    assert_eq!(carla(&["pipeline", "--bogus"], dir).status.code(), Some(1));
    assert_eq!(carla(&["ablate", "--out", "x", "--switch", "no:such"], dir).status.code(), Some(1));
    let o = carla(&["pipeline", "--data", "data", "--out", "r", "--set", "selfsup.classes=1"], dir);
    assert_eq!(o.status.code(), Some(1));
    let o = carla(&["pipeline", "--out", "r"], dir);
    assert_eq!(o.status.code(), Some(1));

    let o = carla(&["pipeline", "--data", "missing", "--out", "r"], dir);
    assert_eq!(o.status.code(), Some(2));
    let o = carla(&["pipeline", "--data", "data", "--out", "r", "--window-size", "9999"], dir);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("[prepare] entity-0"), "{err}");
    assert!(err.contains("window size 9999"), "{err}");

    assert_eq!(carla(&["--help"], dir).status.code(), Some(0));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    fs::write(
        tmp.path().join("run.toml"),
        "seed = 9\nwindow_size = 24\n[selfsup]\nclasses = 4\nepochs = 1\n[pretext]\nepochs = 1\n",
    )
    .unwrap();
    let o = carla(
        &[
            "train", "--stage", "pretext", "--config", "run.toml", "--data", "data", "--out", "run",
            "--window-size", "16", "--stride", "8", "--set", "encoder.channels=[4]", "--set",
            "encoder.kernel_sizes=[3]", "--set", "encoder.rep_dim=4",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = fs::read_to_string(tmp.path().join("run/config.toml")).unwrap();
    assert!(saved.contains("seed = 9"));
    assert!(saved.contains("window_size = 16"));
    assert!(saved.contains("classes = 4"));
}
