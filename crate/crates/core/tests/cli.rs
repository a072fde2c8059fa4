use std::path::Path;
use std::process::{Command, Output};

use quadmpc::gait::GaitKind;
use quadmpc::harness::{
    compute_mse, episode_file, plot_file, read_matrix_csv, ExperimentConfig, ProfileSegment,
    MATRIX_FILE,
};
use quadmpc::estimator::CompensationMode;
use quadmpc::sim::{TrajectoryLog, VX};

fn quadmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadmpc")).args(args).output().unwrap()
}

fn write_short_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::default();
    cfg.profile = vec![
        ProfileSegment { duration: 1.0, v_x: 0.0, gait: GaitKind::Stand },
        ProfileSegment { duration: 1.0, v_x: 0.3, gait: GaitKind::Trot },
    ];
    let path = dir.join("short.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn config_prints_the_defaults() {
    let out = quadmpc(&["config"]);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn run_writes_outputs_and_metrics_recomputes_them() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_short_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = quadmpc(&["run", "--config", &config, "--scenario", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let rows = read_matrix_csv(std::fs::File::open(out_dir.join(MATRIX_FILE)).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, mode) in rows.iter().zip(CompensationMode::ALL) {
        assert_eq!(row.mode, mode);
        assert_eq!(row.scenario, "2");
        let log = TrajectoryLog::load(&out_dir.join(episode_file("2", mode))).unwrap();
        assert!((row.mse_vx_x1000 - 1000.0 * compute_mse(&log, VX).unwrap()).abs() < 1e-9);
        let plot = std::fs::read_to_string(out_dir.join(plot_file("2", mode))).unwrap();
        assert_eq!(plot.lines().next().unwrap(), "t,vx_cmd,vx_meas");
        assert_eq!(plot.lines().count(), log.rows.len() + 1);
    }

    let metrics = quadmpc(&["metrics", "--in", out_dir.to_str().unwrap()]);
    assert!(metrics.status.success());
    let run_table = String::from_utf8(out.stdout).unwrap();
    let metrics_table = String::from_utf8(metrics.stdout).unwrap();
    assert!(run_table.starts_with(&metrics_table));
}

#[test]
fn check_exit_code_follows_the_checks() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_short_config(dir.path());
    let out = quadmpc(&["run", "--config", &config, "--check", "--parallel", "2"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let fails = stdout.lines().filter(|l| l.starts_with("FAIL ")).count();
    let passes = stdout.lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(fails + passes > 0);
    assert_eq!(out.status.success(), fails == 0);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"mpc": {"horizon": 0}}"#).unwrap();
    let out = quadmpc(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&path, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(quadmpc(&["run", "--config", path.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(quadmpc(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let good = write_short_config(dir.path());
    assert_eq!(quadmpc(&["run", "--scenario", "nope", "--config", &good]).status.code(), Some(2));
}
