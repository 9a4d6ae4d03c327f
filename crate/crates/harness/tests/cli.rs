//! CLI contract: exit codes, the flops calculator, and a full-pipeline smoke
//! run through the binary.

use std::path::Path;
use std::process::{Command, Output};

fn mats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mats"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = mats(&[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "stderr was: {err}");
}

#[test]
fn unknown_flag_exits_1() {
    let out = mats(&["flops", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let out = mats(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("gen-data"));
}

#[test]
fn flops_averaging_prints_exact_count() {
    let out = mats(&["flops", "--method", "averaging", "--models", "8", "--params", "282000"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "2256000");
}

#[test]
fn flops_regmean_needs_layers_and_exits_2() {
    let out = mats(&["flops", "--method", "regmean", "--models", "8", "--params", "282000"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer"));
}

#[test]
fn flops_accepts_layer_spec_and_reference_preset() {
    let explicit = mats(&[
        "flops", "--method", "regmean", "--models", "8", "--params", "783000000",
        "--layers", "1024x1024:288,1024x2816:96,2816x38:48",
    ]);
    assert_eq!(explicit.status.code(), Some(0));
    let preset = mats(&[
        "flops", "--method", "regmean", "--models", "8", "--params", "783000000",
        "--layers", "reference-full",
    ]);
    assert_eq!(preset.status.code(), Some(0));
    assert_eq!(stdout(&explicit), stdout(&preset));
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "scenario": "multitask",
        "seeds": [3],
        "out_dir": dir.join("out"),
        "suite": {
            "num_tasks": 2, "classes": 3, "input_dim": 6,
            "train_size": 120, "val_size": 90, "test_size": 90,
            "noise_sigma": 1.0, "prototype_scale": 3.5, "offset_scale": 0.3,
            "rotation_angle": 0.8, "rotation_planes": 6
        },
        "model": {"hidden": [8], "use_bias": true, "use_scaling": false},
        "training": {"lr": 0.2, "batch_size": 16, "steps": 150, "pretrain_steps": 40, "multitask_steps": 150},
        "stats": {"fisher_mode": "empirical", "split": "validation", "exact_fisher_cap": 4096},
        "methods": [
            {"name": "simple_average"},
            {"name": "mats", "objective": "regmean", "init": "average", "cg_iters_grid": [10]}
        ]
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn run_and_report_produce_stable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_config(dir.path());
    let config_arg = config_path.to_str().unwrap();

    let run = mats(&["run", "--config", config_arg]);
    assert_eq!(run.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&run.stderr));
    let report_path = dir.path().join("out/report.md");
    assert!(report_path.exists());
    let first = std::fs::read(&report_path).unwrap();

    // `report` re-emits the same bytes from stored results.
    let report = mats(&["report", "--config", config_arg]);
    assert_eq!(report.status.code(), Some(0));
    assert_eq!(std::fs::read(&report_path).unwrap(), first);

    // Evaluating a stored merge artifact works and tags the split.
    let eval = mats(&["eval", "--config", config_arg, "--method", "mats", "--split", "validation"]);
    assert_eq!(eval.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&eval.stderr));
    let text = stdout(&eval);
    assert!(text.contains("validation"));
    assert!(text.contains("average"));
}

#[test]
fn stage_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_config(dir.path());
    let config_arg = config_path.to_str().unwrap();

    for sub in ["gen-data", "train", "stats"] {
        let out = mats(&[sub, "--config", config_arg]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let merge = mats(&[
        "merge", "--config", config_arg, "--method", "mats",
        "--objective", "regmean", "--init", "average", "--cg-iters", "20",
    ]);
    assert_eq!(
        merge.status.code(),
        Some(0),
        "merge failed: {}",
        String::from_utf8_lossy(&merge.stderr)
    );
    assert!(stdout(&merge).contains("iters=20"));
    assert!(dir.path().join("out/seed_3/merged/mats.mats").exists());
}

#[test]
fn eval_on_missing_artifact_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_config(dir.path());
    let out = mats(&["eval", "--config", config_path.to_str().unwrap(), "--method", "nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
}
