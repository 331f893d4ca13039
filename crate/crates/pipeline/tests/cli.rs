use std::path::Path;
use std::process::{Command, Output};

use triplane_pipeline::RunConfig;

fn triplane(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triplane"))
        .env("TRIPLANE_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: [&str; 8] = ["--shapes", "2", "--points", "128", "--views", "2", "--image-size", "16"];

fn synth(out: &Path) {
    let o = triplane(out, &[&TINY[..], &["synth"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&triplane(dir.path(), &["--help"])), 0);
    assert_eq!(code(&triplane(dir.path(), &["--bogus", "synth"])), 1);
    assert_eq!(code(&triplane(dir.path(), &[])), 1);
    assert_eq!(code(&triplane(dir.path(), &["ablate", "--axis", "depth"])), 1);
}

#[test]
fn missing_artifacts_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = triplane(dir.path(), &["train-ae", "--steps", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));

    synth(dir.path());
    let o = triplane(dir.path(), &["train-tri", "--steps", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("autoencoder"));
    assert_eq!(code(&triplane(dir.path(), &["generate", "--shape", "0"])), 2);
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = triplane(dir.path(), &["train-ae", "--steps", "5", "--lr-start", "1e300", "--lr-end", "1e300"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_records_the_effective_configuration() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg.data.num_shapes, 2);
    assert_eq!(cfg.views.image_size, 16);
    assert!(dir.path().join("data").join("dataset.json").exists());
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = triplane(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().filter(|l| l.contains("PASS")).count(), 6);
}
