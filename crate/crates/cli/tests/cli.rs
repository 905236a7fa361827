//! End-to-end command-line tests driving the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn sdda(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdda"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const TINY_SPEC: &str = r#"
source_channels = 4
common_channels = 2
samples = 64
classes = 2
trials_per_class = 4
sessions_per_domain = 1
snr = 1.4
session_jitter = 0.15
domain_shift = 1.0
class_imbalance = 1.0
sampling_rate = 32
seed = 7
"#;

fn tiny_run_config(scenario: &str) -> String {
    format!(
        r#"
seeds = [1]
variants = ["sdda"]
scenarios = ["{scenario}"]

[synth]
source_channels = 4
common_channels = 2
samples = 64
trials_per_class = 4
sessions_per_domain = 1
sampling_rate = 32
seed = 7

[train]
epochs = 2
batch_size = 8
n_labeled = 4
"#
    )
}

#[test]
fn synth_align_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.toml", TINY_SPEC);

    let out = sdda(&["synth", "--spec", "spec.toml", "--out", "data"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/source.sdda").exists());
    assert!(dir.path().join("data/target.sdda").exists());

    let out = sdda(
        &["align", "--in", "data/source.sdda", "--out", "data/source_aligned.sdda"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    write(dir.path(), "run.toml", &tiny_run_config("uda"));
    let out = sdda(&["train", "--config", "run.toml", "--out", "model"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("model/student.ckpt").exists());
    assert!(dir.path().join("model/teacher.ckpt").exists());
    assert!(dir.path().join("model/history.json").exists());

    let out = sdda(
        &[
            "eval",
            "--student",
            "model/student.ckpt",
            "--data",
            "data/target.sdda",
            "--scenario",
            "uda",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"accuracy\""), "stdout: {stdout}");
    assert!(dir.path().join("data/eval_report.json").exists());
}

#[test]
fn run_writes_canonical_report() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &tiny_run_config("uda"));
    let out = sdda(&["run", "--config", "run.toml", "--out", "results"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("results/report.json")).unwrap();
    assert!(report.contains("\"aggregates\""));
    assert!(report.contains("\"decisions\""));
    // timing lives in the sidecar, not the canonical report
    assert!(!report.contains("wall_clock"));
    assert!(dir.path().join("results/timing.txt").exists());
}

#[test]
fn sda_run_works() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &tiny_run_config("sda"));
    let out = sdda(&["run", "--config", "run.toml", "--out", "results"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdda(&["gradcheck"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn exit_code_1_for_usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    // unknown subcommand
    let out = sdda(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    // config with unknown key
    write(dir.path(), "bad.toml", "definitely_not_a_key = true");
    let out = sdda(&["run", "--config", "bad.toml", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_code_2_for_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    // missing dataset file
    let out = sdda(
        &["align", "--in", "missing.sdda", "--out", "out.sdda"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    // corrupted magic
    std::fs::write(dir.path().join("bad.sdda"), b"NOPE....").unwrap();
    let out = sdda(
        &["align", "--in", "bad.sdda", "--out", "out.sdda"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_shows_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdda(&["--help"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "align", "train", "eval", "run", "gradcheck"] {
        assert!(stdout.contains(sub), "missing {sub} in help");
    }
}
