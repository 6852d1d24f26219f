//! End-to-end tests of the `efcn` binary: golden numbers for `owa`, a full
//! synth/train/predict/evaluate/calibrate pipeline on a tiny dataset, and
//! the documented exit codes on representative failures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn efcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efcn"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Parses CSV rows keyed by their first column.
fn csv_rows(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .skip(1)
        .map(|line| {
            let mut cols = line.split(',');
            let key = cols.next().unwrap_or_default().to_string();
            (key, cols.map(|c| c.parse().expect("numeric cell")).collect())
        })
        .collect()
}

#[test]
fn owa_prints_reference_numbers() {
    let out = efcn(&["owa", "--gamma", "0.8", "--m", "3"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let rows = csv_rows(&stdout(&out));
    assert_eq!(rows.len(), 7);
    let row = |key: &str| {
        &rows
            .iter()
            .find(|(k, _)| k == key)
            .unwrap_or_else(|| panic!("missing row {key}"))
            .1
    };
    for j in 0..3 {
        assert!((row("w1")[j] - if j == 0 { 1.0 } else { 0.0 }).abs() < 1e-9);
        assert!((row("omega")[j] - 0.6819).abs() < 1e-3);
    }
    assert!((row("w1+w2")[0] - 0.8).abs() < 1e-9);
    assert!((row("w1+w2")[1] - 0.8).abs() < 1e-9);
    assert!((row("w1+w2")[2]).abs() < 1e-9);
}

#[test]
fn owa_soft_labels_prints_reference_numbers() {
    let out = efcn(&[
        "owa",
        "--gamma",
        "0.8",
        "--m",
        "3",
        "--soft-labels",
        "singletons,pairs,omega",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let rows = csv_rows(&stdout(&out));
    assert_eq!(rows.len(), 7);
    let w1 = &rows[0].1;
    assert_eq!(rows[0].0, "w1");
    assert_eq!(w1.len(), 7);
    // Columns: w1, w2, w3, w1+w2, w1+w3, w2+w3, omega.
    assert!((w1[0] - 1.0).abs() < 1e-9);
    assert!((w1[3] - 0.625).abs() < 1e-3);
    assert!((w1[4] - 0.625).abs() < 1e-3);
    assert!((w1[6] - 0.489).abs() < 1e-3);
    let omega = &rows[6].1;
    assert_eq!(rows[6].0, "omega");
    assert!((omega[0] - 0.682).abs() < 1e-3);
    assert!((omega[3] - 0.853).abs() < 1e-3);
    assert!((omega[6] - 1.0).abs() < 1e-9);
}

/// A complete micro-scale run configuration rooted in `dir`.
fn write_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 0

[frame]
classes = ["bg", "fg"]

[model]
architecture = "micro"
prototypes = 4
in_channels = 3

[acts]
sets = "singletons,omega"

[decision]
gamma = 0.8

[training]
learning_rate = 0.5
epochs = 2
batch_size = 4
optimizer = "sgd-momentum"

[metrics]
bins = 4

[synth]
count = 12
height = 8
width = 8
boundary_width = 1
noise_sigma = 0.08
unknown_rate = 0.0
min_radius = 2
max_radius = 3
min_shapes = 1
max_shapes = 1
train_fraction = 0.5
val_fraction = 0.0

[paths]
dataset = "{root}/data"
checkpoint = "{root}/model.efcn"
history = "{root}/history.csv"
out_dir = "{root}/out"
"#,
        root = dir.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).expect("config written");
    path
}

#[test]
fn pipeline_smoke() {
    let dir = TempDir::new().expect("tempdir");
    let config = write_config(dir.path());
    let cfg = config.to_str().expect("utf-8 path");

    let out = efcn(&["synth", "--config", cfg]);
    assert!(out.status.success(), "synth stderr: {}", stderr(&out));
    assert!(dir.path().join("data/manifest.txt").is_file());

    let out = efcn(&["train", "--config", cfg]);
    assert!(out.status.success(), "train stderr: {}", stderr(&out));
    assert!(dir.path().join("model.efcn").is_file());
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,pu\n"));
    assert_eq!(history.lines().count(), 3);

    let out = efcn(&["predict", "--config", cfg]);
    assert!(out.status.success(), "predict stderr: {}", stderr(&out));
    let names: Vec<String> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for prefix in ["pred_", "betp_", "overlay_"] {
        let count = names.iter().filter(|n| n.starts_with(prefix)).count();
        assert_eq!(count, 6, "expected one {prefix} file per test image");
    }

    let out = efcn(&["evaluate", "--config", cfg]);
    assert!(out.status.success(), "evaluate stderr: {}", stderr(&out));
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("pu,uiou,ece\n"));

    let out = efcn(&["evaluate", "--config", cfg, "--gamma-sweep"]);
    assert!(out.status.success(), "sweep stderr: {}", stderr(&out));
    let sweep = std::fs::read_to_string(dir.path().join("out/gamma_sweep.csv")).unwrap();
    let rows = csv_rows(&sweep);
    assert_eq!(sweep.lines().next(), Some("gamma,pu,uiou,ece"));
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0].0, "0.5");
    assert_eq!(rows[10].0, "1");

    let out = efcn(&["calibrate", "--config", cfg]);
    assert!(out.status.success(), "calibrate stderr: {}", stderr(&out));
    let reliability = std::fs::read_to_string(dir.path().join("out/reliability.csv")).unwrap();
    assert!(reliability.starts_with("q,count,confidence,utility\n"));
    assert_eq!(reliability.lines().count(), 5);
}

#[test]
fn deterministic_across_runs() {
    let run = || {
        let dir = TempDir::new().expect("tempdir");
        let config = write_config(dir.path());
        let cfg = config.to_str().unwrap().to_string();
        assert!(efcn(&["synth", "--config", &cfg]).status.success());
        assert!(efcn(&["train", "--config", &cfg]).status.success());
        assert!(efcn(&["evaluate", "--config", &cfg]).status.success());
        (
            std::fs::read(dir.path().join("model.efcn")).unwrap(),
            std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap(),
        )
    };
    let (model_a, metrics_a) = run();
    let (model_b, metrics_b) = run();
    assert_eq!(model_a, model_b, "checkpoints differ between identical runs");
    assert_eq!(metrics_a, metrics_b);
}

#[test]
fn malformed_config_exits_2() {
    let dir = TempDir::new().expect("tempdir");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[frame]\nclasses = [\"a\", \"b\"]\n[bogus]\nx = 1\n").unwrap();
    let out = efcn(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("family=config"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = TempDir::new().expect("tempdir");
    let config = write_config(dir.path());
    let out = efcn(&["evaluate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("family=io"), "stderr: {}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = TempDir::new().expect("tempdir");
    let config = write_config(dir.path());
    std::fs::write(dir.path().join("model.efcn"), b"not a checkpoint").unwrap();
    let out = efcn(&["evaluate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("family=format"), "stderr: {}", stderr(&out));
}

#[test]
fn unattainable_gradcheck_tolerance_exits_7() {
    let out = efcn(&["gradcheck", "--params", "20", "--tol", "1e-12"]);
    assert_eq!(out.status.code(), Some(7));
    assert!(stderr(&out).contains("family=numeric"), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("FAIL"));
}
