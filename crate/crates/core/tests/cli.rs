use std::path::Path;
use std::process::{Command, Output};

use spoofl_core::defenses::DefenseConfig;
use spoofl_core::harness::{read_csv, ExperimentConfig, ResultsRow};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spoofl-bench")).args(args).output().expect("spawn spoofl-bench")
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.name = "tiny".into();
    c.data.resolution = 12;
    c.data.train_limit = 40;
    c.data.test_limit = 40;
    c.private_classifier.train.epochs = 1;
    c.fl.rounds = 2;
    c.attack.iterations = 20;
    c.fl.defense = DefenseConfig::noise(1e-3);
    c.metrics.measure_ret = false;
    c.metrics.accuracy_repeats = 1;
    c
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    write(&p, &format!("bogus = 1\n{}", tiny_config().to_toml()));
    let out = bench(&["run", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = bench(&["run", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(&["sweep", "--preset", "table9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    write(&cfg_path, &tiny_config().to_toml());
    let out_dir = dir.path().join("out");
    let out = bench(&["run", cfg_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["results.csv", "timing.csv", "config.toml", "metadata.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let rows: Vec<ResultsRow> = read_csv(&out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].defense, "noise");
    assert!((0.0..=1.0).contains(&rows[0].accuracy));
    let saved = ExperimentConfig::from_toml(&std::fs::read_to_string(out_dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.digest(), rows[0].config_digest);

    let report = bench(&["report", out_dir.to_str().unwrap()]);
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    let md = String::from_utf8(report.stdout).unwrap();
    assert!(md.contains("noise"));
    assert!(out_dir.join("report.md").exists());
}

#[test]
fn federate_attack_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    let fed = bench(&[
        "federate", "--dataset", "synth-digits", "--resolution", "12", "--limit", "16", "--arch", "mlp2",
        "--protocol", "fedsgd", "--clients", "2", "--rounds", "1", "--local-steps", "1", "--batch-size", "2",
        "--save-rounds", "0", "--out", &s("fed"),
    ]);
    assert!(fed.status.success(), "{}", String::from_utf8_lossy(&fed.stderr));
    let update = d.join("fed/updates/round000-client00.bin");
    assert!(update.exists());
    let atk = bench(&[
        "attack", "--method", "dlg", "--iterations", "30", "--input", update.to_str().unwrap(), "--out", &s("atk"),
    ]);
    assert!(atk.status.success(), "{}", String::from_utf8_lossy(&atk.stderr));
    assert!(d.join("atk/recon.png").exists());
    let clf = bench(&[
        "train-classifier", "--dataset", "synth-digits", "--resolution", "12", "--limit", "16",
        "--arch", "convnet-small", "--epochs", "1", "--out", &s("clf.bin"),
    ]);
    assert!(clf.status.success(), "{}", String::from_utf8_lossy(&clf.stderr));
    let score = bench(&["score", "--result", &s("atk"), "--classifier", &s("clf.bin")]);
    assert!(score.status.success(), "{}", String::from_utf8_lossy(&score.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("atk/metrics.json")).unwrap()).unwrap();
    assert!(metrics["ssim"].as_f64().is_some());
}
