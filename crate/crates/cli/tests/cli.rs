//! Runs the `modsynth` binary end to end on a small phantom.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[paths]
template = "phantom/template.nrrd"
output_dir = "out"

[[subjects]]
id = "s1"
volume = "phantom/subject_1.nrrd"
landmarks = "phantom/subject_1_landmarks.csv"

[[subjects]]
id = "s2"
volume = "phantom/subject_2.nrrd"
landmarks = "phantom/subject_2_landmarks.csv"

[learner]
kind = "bdt"

[learner.bdt]
n_iterations = 30
shrinkage = 0.1

[training]
n_samples = 1500

[registration]
cost = "ssd"

[registration.options]
levels = 2
max_iters_per_level = 25

[phantom]
gammas = [2.0, 3.0]

[phantom.params]
template_dims = [24, 24, 12]
n_blobs = 8
n_landmarks = 10
"#;

fn modsynth(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modsynth"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = modsynth(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_all(dir: &Path) {
    std::fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    let c = ["--config", "cfg.toml"];
    for cmd in ["phantom", "preprocess", "train", "synth"] {
        ok(dir, &[&[cmd][..], &c[..]].concat());
    }
    ok(dir, &["register", "--config", "cfg.toml", "--mode", "baseline"]);
    ok(dir, &["register", "--config", "cfg.toml", "--mode", "synth"]);
    ok(dir, &["evaluate", "--config", "cfg.toml"]);
}

#[test]
fn end_to_end_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());
    for f in [
        "out/model/model.bin",
        "out/model/bins.toml",
        "out/model/train_loss.csv",
        "out/model/training_samples.csv",
        "out/synth/s1.nrrd",
        "out/synth/s2.nrrd",
        "out/preprocessed/template.nrrd",
        "out/report/landmark_errors.csv",
        "out/report/summary.csv",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let samples = std::fs::read_to_string(a.path().join("out/model/training_samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 1500);
    let summary = std::fs::read_to_string(a.path().join("out/report/summary.csv")).unwrap();
    assert!(summary.starts_with("subject,method,n,median,mean,std,failed\n"));
    assert!(summary.contains(",baseline-SSD,") && summary.contains(",bdt-SSD,"));

    // Both modes record the same registration options.
    let sidecar = |mode: &str| {
        let text = std::fs::read_to_string(a.path().join(format!("out/registration/{mode}/s1_registration.toml"))).unwrap();
        let v: toml::Value = toml::from_str(&text).unwrap();
        v["options"].clone()
    };
    assert_eq!(sidecar("baseline"), sidecar("synth"));

    // Preprocessing again rewrites identical bytes.
    let before = std::fs::read(a.path().join("out/preprocessed/s1.nrrd")).unwrap();
    ok(a.path(), &["preprocess", "--config", "cfg.toml", "--subject", "s1"]);
    assert_eq!(before, std::fs::read(a.path().join("out/preprocessed/s1.nrrd")).unwrap());
}

#[test]
fn failed_subject_keeps_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("cfg.toml"), CONFIG).unwrap();
    ok(d.path(), &["phantom", "--config", "cfg.toml"]);
    ok(d.path(), &["preprocess", "--config", "cfg.toml"]);
    // No synthesized images exist, so every synth-mode registration aborts.
    let out = ok(d.path(), &["register", "--config", "cfg.toml", "--mode", "synth"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("s1\terror"), "{stdout}");
    let out = ok(d.path(), &["evaluate", "--config", "cfg.toml"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0/2"));
    let summary = std::fs::read_to_string(d.path().join("out/report/summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",true")), "{summary}");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    // Usage errors.
    assert_eq!(modsynth(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(modsynth(d.path(), &["train", "--config", "missing.toml"]).status.code(), Some(1));
    std::fs::write(d.path().join("bad.toml"), "[paths]\ntemplate = 3\n").unwrap();
    assert_eq!(modsynth(d.path(), &["train", "--config", "bad.toml"]).status.code(), Some(1));

    // Missing input volume: an I/O error naming the path.
    std::fs::write(d.path().join("cfg.toml"), CONFIG).unwrap();
    let out = modsynth(d.path(), &["preprocess", "--config", "cfg.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("template.nrrd"));

    // Corrupt volume.
    std::fs::create_dir_all(d.path().join("phantom")).unwrap();
    std::fs::write(d.path().join("phantom/template.nrrd"), b"not an nrrd").unwrap();
    for s in ["subject_1", "subject_2"] {
        std::fs::write(d.path().join(format!("phantom/{s}.nrrd")), b"x").unwrap();
    }
    assert_eq!(modsynth(d.path(), &["preprocess", "--config", "cfg.toml"]).status.code(), Some(2));
}

#[test]
fn training_subject_without_landmarks_fails_fast() {
    let d = tempfile::tempdir().unwrap();
    let cfg = CONFIG.replace("landmarks = \"phantom/subject_2_landmarks.csv\"\n", "");
    std::fs::write(d.path().join("cfg.toml"), cfg).unwrap();
    let out = modsynth(d.path(), &["train", "--config", "cfg.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s2"));
    assert!(!d.path().join("out/model").exists());
}
