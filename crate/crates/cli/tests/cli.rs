use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cdiff_cli::{ExperimentRecord, CONFIG_ECHO, EXIT_CONFIG, EXIT_DATA};

fn cdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdiff"))
        .args(args)
        .env_remove("CDIFF_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cdiff(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_train_args(out: &str) -> Vec<String> {
    let mut args: Vec<String> = ["train", "--preset", "smoke"].map(String::from).to_vec();
    for kv in [
        "trainer.max_steps=3",
        "trainer.batch_size=8",
        "data.train_samples=24",
        "data.test_samples=10",
        "schedule.steps=10",
        "sweep.seeds=[0, 1]",
        "sweep.interference=[[0.8, 0.2]]",
    ] {
        args.push("--set".into());
        args.push(kv.into());
    }
    args.push("--out".into());
    args.push(out.into());
    args
}

/// A checkpoint trained once and shared by the tests below.
fn checkpoint() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, path) = DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let run = tmp.path().join("run");
        let args = tiny_train_args(run.to_str().unwrap());
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        (tmp, run)
    });
    path
}

fn read_records(path: &Path) -> Vec<ExperimentRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn train_writes_log_weights_and_config_echo() {
    let dir = checkpoint();
    for f in [CONFIG_ECHO, "train_log.csv", "model.safetensors", "ema.safetensors"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,loss,snr_db,cbr,wall_ms");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').nth(4) == Some("0.3")));
}

#[test]
fn rerun_from_config_echo_reproduces_log() {
    let dir = checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let again = tmp.path().join("again");
    ok(&[
        "train",
        "--config",
        dir.join(CONFIG_ECHO).to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(dir.join("train_log.csv")).unwrap(),
        std::fs::read(again.join("train_log.csv")).unwrap()
    );
}

#[test]
fn sweep_rows_follow_grid_and_report_sinr() {
    let dir = checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep.csv");
    ok(&[
        "sweep",
        "--checkpoint",
        dir.to_str().unwrap(),
        "--set",
        "sweep.max_samples=2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = read_records(&out);
    // 2 seeds x 1 cbr x (clean + one mix) x 5 snr values
    assert_eq!(rows.len(), 20);
    for seed in [0, 1] {
        assert_eq!(rows.iter().filter(|r| r.seed == seed && r.interference.is_empty()).count(), 5);
    }
    let mixed = rows
        .iter()
        .find(|r| r.interference == "0.8;0.2" && r.snr_db == 0.0)
        .unwrap();
    assert!((mixed.sinr_db.unwrap() + 2.1).abs() < 0.05);
    assert!(rows.iter().filter(|r| r.interference.is_empty()).all(|r| r.sinr_db.is_none()));
    assert!(rows.iter().all(|r| r.is_finite() && r.samples == 2 && r.pipeline == "cdiff"));
}

#[test]
fn empty_grid_fails_without_output() {
    let dir = checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep.csv");
    let res = cdiff(&[
        "sweep",
        "--checkpoint",
        dir.to_str().unwrap(),
        "--set",
        "sweep.snr_db=[]",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(EXIT_CONFIG));
    assert!(!out.exists());
}

#[test]
fn cbr_above_trained_is_rejected() {
    let dir = checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep.csv");
    let res = cdiff(&[
        "sweep",
        "--checkpoint",
        dir.to_str().unwrap(),
        "--set",
        "sweep.cbr=[0.2, 0.6]",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(EXIT_CONFIG));
    assert!(!out.exists());
}

#[test]
fn visualize_emits_requested_pairs() {
    let dir = checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("vis");
    ok(&[
        "visualize",
        "--checkpoint",
        dir.to_str().unwrap(),
        "--count",
        "8",
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 8);
    let sidecar = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(sidecar.lines().count(), 9);
    let img = image::open(out.join("pair-000.png")).unwrap();
    assert_eq!(img.height(), 16);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let res = cdiff(&["train", "--preset", "smoke", "--set", "trainer.bogus=1", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bogus"));
    assert_eq!(cdiff(&["train", "--preset", "nope"]).status.code(), Some(EXIT_CONFIG));
    assert_eq!(cdiff(&["frobnicate"]).status.code(), Some(EXIT_CONFIG));
}

#[test]
fn missing_dataset_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let res = cdiff(&[
        "train",
        "--preset",
        "mnist-fixed",
        "--set",
        &format!("data.root={:?}", tmp.path().join("empty").display().to_string()),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(EXIT_DATA));
}

#[test]
fn oracle_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("oracle.csv");
    ok(&["oracle", "--n", "100,1000", "--seeds", "3", "--out", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("n,seed,mse"));
    assert_eq!(lines.count(), 6);
}
