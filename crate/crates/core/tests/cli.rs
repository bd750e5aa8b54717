use std::path::Path;
use std::process::{Command, Output};

use r2a_core::cli::{EXIT_FAILURE, EXIT_INVALID, EXIT_OK};
use r2a_core::synthgen::{self, SynthConfig};

fn r2a(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2a"))
        .args(args)
        .env("R2A_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small synthetic dataset; `extra` goes to `synth`.
fn dataset(root: &Path, extra: &[&str]) -> String {
    let out = root.join("ds");
    let mut args = vec!["synth", "--out", &s(&out), "--seed", "9", "--train-per-class", "2"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    args.extend(extra.iter().map(|a| a.to_string()));
    let o = r2a(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    s(&out.join("manifest.json"))
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn identity_scoring_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[]);
    let scores = dir.path().join("scores");
    let o = r2a(&["score", "--manifest", &m, "--out", &s(&scores)]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(scores.join("scores.json").is_file());

    let rep = dir.path().join("report.json");
    let o = r2a(&["eval", "--manifest", &m, "--scores", &s(&scores), "--out", &s(&rep)]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&rep)["macro_avg"]["i_auc"].as_f64().unwrap() > 0.9);
}

#[test]
fn learned_mode_without_checkpoint_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[]);
    let o = r2a(&["score", "--manifest", &m, "--mode", "learned", "--out", &s(&dir.path().join("x"))]);
    assert_eq!(code(&o), EXIT_INVALID);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn pixel_eval_with_a_missing_mask_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[]);
    let scores = dir.path().join("scores");
    assert_eq!(code(&r2a(&["score", "--manifest", &m, "--out", &s(&scores)])), EXIT_OK);

    let mut manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&m).unwrap()).unwrap();
    let sample = manifest["samples"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|e| e["role"] == "test" && e["label"] == 1)
        .unwrap();
    sample.as_object_mut().unwrap().remove("mask");
    std::fs::write(&m, serde_json::to_string(&manifest).unwrap()).unwrap();

    let o = r2a(&["eval", "--manifest", &m, "--scores", &s(&scores)]);
    assert_eq!(code(&o), EXIT_INVALID, "{}", String::from_utf8_lossy(&o.stderr));
    // image-level metrics do not need masks
    assert_eq!(code(&r2a(&["eval", "--manifest", &m, "--scores", &s(&scores), "--no-pixel"])), EXIT_OK);
}

#[test]
fn missing_manifest_is_an_io_failure() {
    let o = r2a(&["score", "--manifest", "/nonexistent/manifest.json", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), EXIT_FAILURE);
}

#[test]
fn bad_arguments_are_rejected_by_the_parser() {
    assert_ne!(code(&r2a(&["score", "--mode", "sideways"])), EXIT_OK);
    assert_ne!(code(&r2a(&["synth"])), EXIT_OK);
}

#[test]
fn verify_passes() {
    let o = r2a(&["verify"]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("PASS"));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[]);
    let out = dir.path().join("train");
    let o = r2a(&["train", "--manifest", &m, "--out", &s(&out), "--epochs", "2"]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint.r2ck").is_file());
    assert_eq!(report(&out.join("train_log.json"))["epochs"].as_array().unwrap().len(), 2);

    let o = r2a(&["train", "--manifest", &m, "--out", &s(&out), "--epochs", "0"]);
    assert_eq!(code(&o), EXIT_INVALID);
}

// 100 images per class and category keeps the macro AUROC's standard
// deviation near 0.03, so the ±0.1 band is a meaningful check.
#[test]
fn scores_are_chance_level_without_a_planted_signal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        mu: 0.0,
        strong: false,
        train_normal: 2,
        train_anomalous: 2,
        test_normal: 100,
        test_anomalous: 100,
        ..SynthConfig::strong(9)
    };
    let ds = dir.path().join("ds");
    synthgen::generate(&cfg).unwrap().write(&ds).unwrap();
    let m = s(&ds.join("manifest.json"));
    let scores = dir.path().join("scores");
    assert_eq!(code(&r2a(&["score", "--manifest", &m, "--out", &s(&scores)])), EXIT_OK);
    let rep = dir.path().join("report.json");
    assert_eq!(code(&r2a(&["eval", "--manifest", &m, "--scores", &s(&scores), "--out", &s(&rep), "--no-pixel"])), EXIT_OK);
    let auc = report(&rep)["macro_avg"]["i_auc"].as_f64().unwrap();
    assert!((auc - 0.5).abs() <= 0.1, "I-AUC {auc}");
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[]);
    let run = |jobs: &str| {
        let t = dir.path().join(format!("train{jobs}"));
        let sc = dir.path().join(format!("scores{jobs}"));
        assert_eq!(code(&r2a(&["--jobs", jobs, "train", "--manifest", &m, "--out", &s(&t), "--epochs", "2"])), EXIT_OK);
        let ck = s(&t.join("checkpoint.r2ck"));
        let o = r2a(&["--jobs", jobs, "score", "--manifest", &m, "--mode", "learned", "--checkpoint", &ck, "--out", &s(&sc)]);
        assert_eq!(code(&o), EXIT_OK);
        (std::fs::read(&ck).unwrap(), std::fs::read(sc.join("scores.json")).unwrap())
    };
    assert!(run("1") == run("4"));
}
