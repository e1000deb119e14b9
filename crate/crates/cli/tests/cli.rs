use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pulseprog_cli::manifest::Manifest;

const SMALL: &str = r#"{
    "dataset": {"n_samples": 200},
    "train": {"epochs": 2},
    "finetune": {"schedule": [{"kernel": 11, "epochs": 1}, {"kernel": 1, "epochs": 1}]},
    "eval": {"oneshot": {"n_trials": 20}, "wav_sweep": {"repeats": 1}},
    "device": {"switching_curve": {"pulses": 200, "devices": 2}}
}"#;

fn pulseprog(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pulseprog"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

#[test]
fn default_config_gives_identical_manifests_and_reruns_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = pulseprog(dir.path(), &["--seed", "42", "--out", out, "pipeline"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/manifest.json")).unwrap();
    let b = fs::read(dir.path().join("b/manifest.json")).unwrap();
    assert_eq!(a, b);

    let m = Manifest::load(&dir.path().join("a")).unwrap().unwrap();
    assert_eq!(m.stages.len(), 8);
    assert!(m.failed.is_none());

    let modified = fs::metadata(dir.path().join("a/model_finetuned.json")).unwrap().modified().unwrap();
    let o = pulseprog(dir.path(), &["--seed", "42", "--out", "a", "pipeline"]);
    assert!(o.status.success());
    assert!(stderr(&o).matches("up to date").count() == 8, "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("a/manifest.json")).unwrap(), a);
    let again = fs::metadata(dir.path().join("a/model_finetuned.json")).unwrap().modified().unwrap();
    assert_eq!(modified, again);
}

#[test]
fn switching_curve_stage_alone_emits_one_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"stages": ["device.switching-curve"], "out": "run"}"#);
    let o = pulseprog(dir.path(), &["--config", &cfg, "pipeline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csvs: Vec<_> = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(csvs, ["switching_curve.csv"]);
    let text = fs::read_to_string(dir.path().join("run/switching_curve.csv")).unwrap();
    // header + 2 polarities x 10 devices x 8000 pulses
    assert_eq!(text.lines().count(), 1 + 2 * 10 * 8000);
}

#[test]
fn corrupt_dataset_fails_the_dataset_stage_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let o = pulseprog(dir.path(), &["--config", &cfg, "--out", "run", "gen-dataset"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let bin = dir.path().join("run/dataset.samples.bin");
    let mut bytes = fs::read(&bin).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&bin, bytes).unwrap();

    let o = pulseprog(dir.path(), &["--config", &cfg, "--out", "run", "train"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("stage `dataset`"), "{err}");
    assert!(err.contains("dataset.samples.bin"), "{err}");
    let m = Manifest::load(&dir.path().join("run")).unwrap().unwrap();
    assert_eq!(m.failed.unwrap().stage.as_str(), "dataset");
}

#[test]
fn corrupt_dataset_without_manifest_is_reported_by_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    assert!(pulseprog(dir.path(), &["--config", &cfg, "--out", "run", "gen-dataset"]).status.success());
    let meta = dir.path().join("run/dataset.meta.json");
    fs::write(&meta, "{ not json").unwrap();
    let ds = pulseprog::dataset::Dataset::load(&dir.path().join("run"), "dataset");
    let err = ds.unwrap_err().to_string();
    assert!(err.contains("dataset.meta.json"), "{err}");
}

#[test]
fn failing_stage_keeps_completed_stages_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"stages": ["device.switching-curve", "eval.oneshot"], "eval": {"predictor": "nope"},
            "device": {"switching_curve": {"pulses": 10, "devices": 1}}}"#,
    );
    let o = pulseprog(dir.path(), &["--config", &cfg, "--out", "run", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown predictor `nope`"), "{}", stderr(&o));
    let m = Manifest::load(&dir.path().join("run")).unwrap().unwrap();
    assert_eq!(m.stages.len(), 1);
    assert_eq!(m.stages[0].stage.as_str(), "device.switching-curve");
    assert_eq!(m.failed.unwrap().stage.as_str(), "eval.oneshot");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"trian": {}}"#);
    let o = pulseprog(dir.path(), &["--config", &bad, "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));

    assert_eq!(pulseprog(dir.path(), &["train", "--checkpoint-metric", "x"]).status.code(), Some(1));
    assert_eq!(pulseprog(dir.path(), &["finetune", "--schedule", "10:5"]).status.code(), Some(1));
    assert_eq!(pulseprog(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(pulseprog(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_config_and_change_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let run = |extra: &[&str]| {
        let mut args = vec!["--config", cfg.as_str(), "--out", "run", "train"];
        args.extend_from_slice(extra);
        let o = pulseprog(dir.path(), &args);
        assert!(o.status.success(), "{}", stderr(&o));
        Manifest::load(&dir.path().join("run")).unwrap().unwrap()
    };
    let first = run(&[]);
    let history = fs::read_to_string(dir.path().join("run/train_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);

    let second = run(&["--epochs", "4", "--lr", "0.002", "--batch", "32", "--checkpoint-metric", "g"]);
    let history = fs::read_to_string(dir.path().join("run/train_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 5);
    // The dataset is reused; the model is not.
    let fp = |m: &Manifest, s: &str| m.stages.iter().find(|r| r.stage.as_str() == s).unwrap().fingerprint.clone();
    assert_eq!(fp(&first, "dataset"), fp(&second, "dataset"));
    assert_ne!(fp(&first, "train"), fp(&second, "train"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["metric"], "g");
}

#[test]
fn oracle_evaluations_need_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let o = pulseprog(
        dir.path(),
        &["--config", &cfg, "--out", "run", "--jobs", "1", "eval-oneshot", "--predictor", "oracle", "--trials", "30"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!dir.path().join("run/dataset.meta.json").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/oneshot_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["predictor"], "oracle");
    assert_eq!(summary["trials"], 30);
    let trials = fs::read_to_string(dir.path().join("run/oneshot_trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 31);
}
