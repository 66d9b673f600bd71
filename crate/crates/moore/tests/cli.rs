//! End-to-end CLI checks through the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn moore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moore"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = moore::expman::ExperimentConfig::defaults_for("grid_mt3").unwrap();
    cfg.arch.conv_channels = vec![4, 6];
    cfg.arch.head_hidden = vec![8];
    cfg.total_steps = 400;
    cfg.steps_per_epoch = 200;
    cfg.eval_episodes = 2;
    cfg.seeds = vec![7];
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = moore(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = moore(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "nonsense_key=1",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nonsense_key"), "{stderr}");
}

#[test]
fn train_writes_metrics_and_checkpoint_then_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = moore(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "k=2",
        "--seed",
        "7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let metrics: Vec<&String> = files.iter().filter(|f| f.ends_with(".metrics.jsonl")).collect();
    let ckpts: Vec<&String> = files.iter().filter(|f| f.ends_with(".ckpt.moor")).collect();
    assert_eq!(metrics.len(), 1, "{files:?}");
    assert_eq!(ckpts.len(), 1, "{files:?}");
    let metrics_before = std::fs::read(out_dir.join(metrics[0])).unwrap();

    // non-empty out dir without --force is refused
    let refused = moore(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(refused.status.code(), Some(2));

    // rerun with --force reproduces identical artifacts
    let rerun = moore(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "k=2",
        "--seed",
        "7",
        "--out",
        out_dir.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(rerun.status.code(), Some(0));
    let metrics_after = std::fs::read(out_dir.join(metrics[0])).unwrap();
    assert_eq!(metrics_before, metrics_after);
}

#[test]
fn analyze_emits_per_task_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = moore(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let ckpt = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with(".ckpt.moor"))
        .unwrap();
    let out = moore(&["analyze", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("task,x,y"), "{stdout}");
    assert!(stdout.contains("lava_gap"));
    assert_eq!(stdout.lines().count(), 4); // header + 3 tasks
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let out = moore(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in [
        "stiefel",
        "gs_fixed_point",
        "gs_permutation_span",
        "pcgrad",
        "gae_closed_forms",
    ] {
        assert!(stdout.contains(&format!("{name}: PASS")), "{stdout}");
    }
}

#[test]
fn gradcheck_subcommand_reports_pass() {
    let out = moore(&["gradcheck", "--k", "2", "--channels", "3,5"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
}

#[test]
fn sweep_prints_the_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = moore(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "representation=moore,moe",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("representation=moore"));
    assert!(stdout.contains("representation=moe"));
    assert!(out_dir.join("aggregate.csv").exists());
}

#[test]
fn transfer_requires_a_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = moore(&[
        "transfer",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
