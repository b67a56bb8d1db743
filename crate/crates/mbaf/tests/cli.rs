//! End-to-end checks of the command-line interface: exit codes, file
//! outputs, and determinism of repeated runs.

use mbaf::config::ExperimentConfig;
use std::path::Path;
use std::process::{Command, Output};

fn mbaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbaf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 5;
    cfg.code.k = 4;
    cfg.code.m = 2;
    cfg.code.l = 2;
    cfg.code.t = 2;
    cfg.code.n_iter = 1;
    cfg.model.d_model = 8;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 16;
    cfg.train.batch_size = 32;
    cfg.train.total_batches = 3;
    cfg.train.curriculum_batches = 0;
    cfg.train.microbatch = 32;
    cfg.train.log_every = 1;
    cfg.train.validate_every = None;
    cfg.train.stop_at_bler = None;
    cfg.train.recalibrate_episodes = 128;
    cfg.eval.trials = 60;
    cfg.eval.chunk = 32;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(mbaf(&["--help"]).status.code(), Some(0));
    assert_eq!(mbaf(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(mbaf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mbaf(&["train"]).status.code(), Some(1));
}

#[test]
fn missing_config_file_names_the_path() {
    let out = mbaf(&["train", "--config", "/no/such/config.toml", "--out", "/tmp/x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/config.toml"), "{err}");
}

#[test]
fn invalid_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "mystery_knob = 3\n").unwrap();
    let out = mbaf(&["bounds", "--config", path.to_str().unwrap(), "--out", "/tmp/x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mystery_knob"), "{err}");
}

#[test]
fn bounds_grid_shape_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bounds.csv");
    let out = mbaf(&["bounds", "--config", "paper", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "snr_db,t,n,normal_approx_rate,sum_capacity");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    // 21 SNR points times 6 round counts.
    assert_eq!(rows.len(), 126);
    for row in &rows {
        assert!(row[3] < row[4], "approximation must stay below capacity: {row:?}");
    }
    // Capacity strictly increases across the sweep for a fixed round count.
    let t7: Vec<&Vec<f64>> = rows.iter().filter(|r| r[1] == 7.0).collect();
    assert_eq!(t7.len(), 21);
    for pair in t7.windows(2) {
        assert!(pair[1][4] > pair[0][4]);
    }
}

#[test]
fn train_eval_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("tiny.toml");
    tiny_config().save(&config_path).unwrap();
    let ckpt = dir.path().join("tiny.ckpt");

    let out = mbaf(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("tiny.train.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "batch_idx,snr_db,loss,grad_norm,wall_time");
    // Header plus one record per batch at log_every = 1.
    assert_eq!(log.lines().count(), 4);

    let eval_csv = |name: &str, seed: &str| -> (String, String) {
        let path = dir.path().join(name);
        let out = mbaf(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(companion(&path).exists());
        (
            std::fs::read_to_string(&path).unwrap(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    };
    let (a, _) = eval_csv("a.csv", "9");
    let (b, _) = eval_csv("b.csv", "9");
    let (_, err) = eval_csv("c.csv", "907");
    assert_eq!(a, b);
    // The seed flag reaches the resolved configuration.
    assert!(err.contains("seed = 907"), "{err}");
    assert_eq!(a.lines().count(), 2);
    assert_eq!(a.lines().next().unwrap(), "snr_db,t,rate,bler,ci_low,ci_high,trials");
}

fn companion(path: &Path) -> std::path::PathBuf {
    path.with_extension("bounds.csv")
}

#[test]
fn eval_with_mismatched_config_warns_and_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("tiny.toml");
    tiny_config().save(&config_path).unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    let out = mbaf(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));

    // The desk preset has a different code section than the checkpoint.
    let results = dir.path().join("warned.csv");
    let out = mbaf(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        "desk",
        "--out",
        results.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warning"), "{err}");
    assert!(results.exists());
}

#[test]
fn eval_missing_checkpoint_is_runtime_failure() {
    let out = mbaf(&["eval", "--checkpoint", "/no/such.ckpt", "--out", "/tmp/x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}
