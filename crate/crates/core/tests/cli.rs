//! Runs the `ddpm` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddpm::eval::Moments;
use ndarray::Array2;

fn ddpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddpm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DDPM_SEED")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const MINIMAL: &str = r#"{
  "data": {"kind": "unit_gaussian", "dim": 1},
  "schedule": {"kind": "linear_beta", "T": 8},
  "model": {"dim": 1, "hidden": [8], "embed_dim": 4, "mode": "predict_eps", "variance_mode": "noising_variance"},
  "train": {"variant": "simplified_ddpm", "steps": 10, "batch_size": 16},
  "seed": 3
}"#;

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), config).unwrap();
    dir
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

#[test]
fn schedule_table_for_default_linear_beta() {
    let dir = setup(r#"{"kind": "linear_beta", "T": 1000}"#);
    let out = ddpm(dir.path(), &["schedule", "--config", "run.json", "--out", "s.csv"]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(text.starts_with("t,lambda,Lambda,sigma2,snr,log_snr\n"));
    let rows = csv_rows(&dir.path().join("s.csv"));
    assert_eq!(rows.len(), 1000);
    assert!(rows.windows(2).all(|w| w[1][4] < w[0][4]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("snr(1) = 9.999"), "{stdout}");
}

#[test]
fn schedule_prints_quarter_cosine_lambdas() {
    let dir = setup(r#"{"kind": "quarter_cosine", "T": 2}"#);
    let out = ddpm(dir.path(), &["schedule", "--config", "run.json", "--out", "s.csv"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lambda = |t: usize| -> f64 {
        let line = stdout.lines().find(|l| l.starts_with(&format!("Lambda_{t} = "))).unwrap();
        line.split(" = ").nth(1).unwrap().parse().unwrap()
    };
    // cos(π t / (2 T)) with the last level floored at 1e-6
    assert!((lambda(1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert_eq!(lambda(2), 1e-6);
}

#[test]
fn schedule_reads_the_schedule_of_a_run_config() {
    let dir = setup(MINIMAL);
    let out = ddpm(dir.path(), &["schedule", "--config", "run.json", "--out", "s.csv"]);
    assert_eq!(code(&out), 0);
    assert_eq!(csv_rows(&dir.path().join("s.csv")).len(), 8);
}

#[test]
fn malformed_json_exits_2_and_writes_nothing() {
    let dir = setup("{\"kind\": \"linear_beta\", \"T\": ");
    for args in [
        &["schedule", "--config", "run.json", "--out", "s.csv"][..],
        &["train", "--config", "run.json", "--run-dir", "r"][..],
    ] {
        let out = ddpm(dir.path(), args);
        assert_eq!(code(&out), 2);
    }
    let left: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(left.len(), 1);
}

#[test]
fn invalid_descriptor_is_a_config_error() {
    let dir = setup(r#"{"kind": "log_snr_linear", "T": 4, "snr_max": 1.0, "snr_min": 2.0}"#);
    assert_eq!(code(&ddpm(dir.path(), &["schedule", "--config", "run.json"])), 2);
}

#[test]
fn minimal_training_run_is_deterministic() {
    let dir = setup(MINIMAL);
    for run in ["a", "b"] {
        let out = ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", run]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a/loss.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/loss.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(csv_rows(&dir.path().join("a/loss.csv")).len(), 10);
    assert_eq!(
        std::fs::read(dir.path().join("a/checkpoint.json")).unwrap(),
        std::fs::read(dir.path().join("b/checkpoint.json")).unwrap()
    );
}

#[test]
fn default_run_directory_is_named_by_seed() {
    let dir = setup(MINIMAL);
    let out = ddpm(dir.path(), &["train", "--config", "run.json"]);
    assert_eq!(code(&out), 0);
    let printed = String::from_utf8(out.stdout).unwrap();
    let name = Path::new(printed.trim()).file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.starts_with("seed3-"), "{name}");
    assert!(dir.path().join("runs").join(&name).join("loss.csv").exists());
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = setup(MINIMAL);
    assert_eq!(code(&ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "a"])), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_ddpm"))
        .args(["train", "--config", "run.json", "--run-dir", "b"])
        .current_dir(dir.path())
        .env("DDPM_SEED", "4")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let b = std::fs::read_to_string(dir.path().join("b/loss.csv")).unwrap();
    assert!(b.lines().nth(1).unwrap().ends_with(",4,0"));
    assert_ne!(std::fs::read_to_string(dir.path().join("a/loss.csv")).unwrap(), b);
    let bad = Command::new(env!("CARGO_BIN_EXE_ddpm"))
        .args(["train", "--config", "run.json", "--run-dir", "c"])
        .current_dir(dir.path())
        .env("DDPM_SEED", "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn incompatible_objective_is_rejected_before_training() {
    let dir = setup(&MINIMAL.replace("simplified_ddpm", "vdm"));
    let out = ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "r"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("r").exists());
}

#[test]
fn divergence_exits_3() {
    let dir = setup(&MINIMAL.replace("\"batch_size\": 16", "\"batch_size\": 16, \"adam\": {\"lr\": 1e308}"));
    let out = ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "r"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn missing_inputs_exit_4() {
    let dir = setup(MINIMAL);
    assert_eq!(code(&ddpm(dir.path(), &["train", "--config", "nope.json"])), 4);
    assert_eq!(code(&ddpm(dir.path(), &["sample", "--checkpoint", "nope.json", "-n", "3"])), 4);
    assert_eq!(
        code(&ddpm(dir.path(), &["eval", "--checkpoint", "nope.json", "--config", "run.json"])),
        4
    );
}

#[test]
fn sampling_zero_rows_writes_a_header() {
    let dir = setup(MINIMAL);
    assert_eq!(code(&ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "r"])), 0);
    let out = ddpm(dir.path(), &["sample", "--checkpoint", "r/checkpoint.json", "-n", "0"]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("r/samples.csv")).unwrap(), "x_1\n");
}

#[test]
fn sampling_is_repeatable_and_traces_every_level() {
    let dir = setup(MINIMAL);
    assert_eq!(code(&ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "r"])), 0);
    let args = ["sample", "--checkpoint", "r/checkpoint.json", "-n", "50", "--trace", "--out"];
    assert_eq!(code(&ddpm(dir.path(), &[&args[..], &["a"]].concat())), 0);
    assert_eq!(code(&ddpm(dir.path(), &[&args[..], &["b"]].concat())), 0);
    let a = std::fs::read(dir.path().join("a/samples.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/samples.csv")).unwrap());
    assert_eq!(std::fs::read_dir(dir.path().join("a/trace")).unwrap().count(), 9);
    assert_eq!(
        std::fs::read(dir.path().join("a/trace/x_0000.csv")).unwrap(),
        a,
        "the level-0 trace is the sample file"
    );
    let other = ddpm(dir.path(), &["sample", "--checkpoint", "r/checkpoint.json", "-n", "50", "--seed", "8", "--out", "c"]);
    assert_eq!(code(&other), 0);
    assert_ne!(a, std::fs::read(dir.path().join("c/samples.csv")).unwrap());
    // SVG output only makes sense for two-dimensional data
    let svg = ddpm(dir.path(), &["sample", "--checkpoint", "r/checkpoint.json", "-n", "5", "--svg"]);
    assert_eq!(code(&svg), 2);
}

#[test]
fn analytic_unit_gaussian_checkpoint_samples_pass_moment_test() {
    let dir = setup(&MINIMAL.replace("\"T\": 8", "\"T\": 20"));
    let out = ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "o", "--analytic"]);
    assert_eq!(code(&out), 0);
    let out = ddpm(dir.path(), &["sample", "--checkpoint", "o/checkpoint.json", "-n", "100000"]);
    assert_eq!(code(&out), 0);
    let rows = csv_rows(&dir.path().join("o/samples.csv"));
    let x = Array2::from_shape_vec((rows.len(), 1), rows.into_iter().flatten().collect()).unwrap();
    assert_eq!(x.nrows(), 100_000);
    assert!(Moments::of(&x).unwrap().standard_within(4.0));
}

const EVAL_CONFIG: &str = r#"{
  "data": {"kind": "unit_gaussian", "dim": 1},
  "schedule": {"kind": "linear_beta", "T": 8},
  "model": {"dim": 1, "hidden": [8], "embed_dim": 4, "mode": "predict_eps", "variance_mode": "noising_variance"},
  "train": {"variant": "simplified_ddpm", "steps": 10, "batch_size": 16},
  "eval": {
    "samples": 5000,
    "moments": {},
    "histogram": {"bins": 20, "range": [-4.0, 4.0], "max_kl": LIMIT},
    "score_sweep": {"levels": [1, 4, 8]},
    "endpoint_invariance": {"levels": [16, 32]},
    "elbo_constancy": {"n": 1000}
  },
  "seed": 3
}"#;

#[test]
fn eval_reports_every_requested_metric() {
    let dir = setup(&EVAL_CONFIG.replace("LIMIT", "100.0"));
    assert_eq!(code(&ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "r"])), 0);
    let out = ddpm(dir.path(), &["eval", "--checkpoint", "r/checkpoint.json", "--config", "run.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/metrics.json")).unwrap()).unwrap();
    for key in [
        "moment_mean_error",
        "moment_var_error",
        "histogram_kl",
        "score_rmse_t1",
        "score_rmse_t4",
        "score_rmse_t8",
        "endpoint_gap_T16",
        "endpoint_relative_gap_T32",
        "elbo_constancy_gap",
        "seed",
        "schedule",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let gaps = std::fs::read_to_string(dir.path().join("r/endpoint_gaps.csv")).unwrap();
    assert_eq!(gaps.lines().count(), 3);
    // a second evaluation appends a row to the summary
    assert_eq!(code(&ddpm(dir.path(), &["eval", "--checkpoint", "r/checkpoint.json", "--config", "run.json"])), 0);
    let summary = std::fs::read_to_string(dir.path().join("r/metrics.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn eval_threshold_violation_exits_1() {
    let dir = setup(&EVAL_CONFIG.replace("LIMIT", "1e-9"));
    assert_eq!(code(&ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "r"])), 0);
    let out = ddpm(dir.path(), &["eval", "--checkpoint", "r/checkpoint.json", "--config", "run.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("histogram_kl"));
    assert!(dir.path().join("r/metrics.json").exists());
}

#[test]
fn score_sweep_of_data_predicting_model_is_a_config_error() {
    let config = EVAL_CONFIG
        .replace("LIMIT", "1.0")
        .replace("predict_eps", "predict_x0")
        .replace("simplified_ddpm", "rao_blackwell");
    let dir = setup(&config);
    assert_eq!(code(&ddpm(dir.path(), &["train", "--config", "run.json", "--run-dir", "r"])), 0);
    let out = ddpm(dir.path(), &["eval", "--checkpoint", "r/checkpoint.json", "--config", "run.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reference_gmm1d_config_halves_the_smoothed_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("gmm1d.json");
    let out = ddpm(
        dir.path(),
        &["train", "--config", config.to_str().unwrap(), "--run-dir", "r", "--steps", "2000"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let values: Vec<f64> = csv_rows(&dir.path().join("r/loss.csv")).iter().map(|r| r[2]).collect();
    let smooth = ddpm::trainer::smoothed(&values, 0.01);
    assert!(smooth.last().unwrap() * 2.0 < values[0], "{} vs {}", smooth.last().unwrap(), values[0]);
}

#[test]
fn reference_configs_parse() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        serde_json::from_str::<ddpm::cli::RunConfig>(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
