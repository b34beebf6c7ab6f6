//! The `cmow` binary: exit codes and file outputs.

use std::process::{Command, Output};

fn cmow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmow"))
        .args(args)
        .env("CMOW_LOG", "warn")
        .output()
        .expect("run cmow")
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cmow(&["bench", "--batches", "2", "--batch-size", "4", "--vocab-size", "50", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("hybrid-bidirectional,2,4,64,"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("sent_per_s"));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cmow(&["finetune", "--out", out]).status.code(), Some(2));
    assert_eq!(cmow(&["pretrain", "--alpha", "1.5", "--out", out]).status.code(), Some(2));
}

#[test]
fn unreadable_inputs_exit_with_3() {
    let o = cmow(&["inspect-checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn bare_config_file_name_resolves_against_the_working_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[data]\nvocab = \"vocab.txt\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cmow"))
        .args(["--config", "run.toml", "finetune"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(2), "{stderr}");
    assert!(stderr.contains(&dir.path().join("vocab.txt").display().to_string()), "{stderr}");
}
