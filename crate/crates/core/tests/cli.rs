use std::path::Path;
use std::process::{Command, Output};

use zoro_mpc::table::Table;

fn zoro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zoro")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn solve(dir: &Path, config: &str) -> Output {
    let cfg = write_config(dir, "config.json", config);
    zoro(&["solve", "--config", &cfg, "--out", dir.to_str().unwrap()])
}

const SOLVE: &str = r#"{"experiment": "solve", "model": "diff_drive"}"#;

#[test]
fn solve_writes_trajectory_tube_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = solve(dir.path(), SOLVE);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = Table::read(&dir.path().join("trajectory.csv")).unwrap();
    let tube = Table::read(&dir.path().join("tube.csv")).unwrap();
    assert_eq!(traj.rows.len(), 21);
    assert_eq!(tube.rows.len(), 21);
    assert_eq!(traj.header.len(), 2 + 5 + 2);
    assert_eq!(tube.header.len(), 1 + 25 + 11);
    // terminal node carries no control
    assert!(traj.rows[20][7].is_nan() && traj.rows[19][7].is_finite());
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("solver_log.json")).unwrap()).unwrap();
    assert_eq!(log["status"], "converged");
    assert_eq!(log["logs"].as_array().unwrap().len() as u64, log["iterations"].as_u64().unwrap());
}

#[test]
fn zero_uncertainty_gives_zero_tube() {
    let dir = tempfile::tempdir().unwrap();
    let zeros = serde_json::to_string(&vec![vec![0.0; 5]; 5]).unwrap();
    let cfg = format!(r#"{{"experiment": "solve", "zoro": {{"p0_bar": {zeros}, "w": {zeros}}}}}"#);
    assert_eq!(solve(dir.path(), &cfg).status.code(), Some(0));
    let tube = Table::read(&dir.path().join("tube.csv")).unwrap();
    assert!(tube.rows.iter().all(|r| r[1..].iter().all(|&v| v == 0.0)));
}

#[test]
fn check_accepts_solution_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve(dir.path(), SOLVE).status.code(), Some(0));
    let cfg = dir.path().join("config.json");
    let args = ["check", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    assert_eq!(zoro(&args).status.code(), Some(0));

    // push the forward speed far past its tightened upper bound
    let path = dir.path().join("trajectory.csv");
    let mut t = Table::read(&path).unwrap();
    let v = t.header.iter().position(|h| h == "x_3").unwrap();
    t.rows[5][v] = 1.5;
    t.write(&path).unwrap();
    let out = zoro(&args);
    assert_eq!(out.status.code(), Some(4));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("node 5 row 1"), "{msg}");
}

#[test]
fn bad_configs_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", "{\n  \"experiment\": \"solve\",\n  \"zoro\": {\"gamma\": -1}\n}\n");
    let out = zoro(&["solve", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let good = write_config(dir.path(), "good.json", SOLVE);
    assert_eq!(zoro(&["scaling", "--config", &good]).status.code(), Some(2));
    assert_eq!(zoro(&["solve", "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(zoro(&["solve"]).status.code(), Some(2));
}

#[test]
fn written_tables_re_emit_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve(dir.path(), SOLVE).status.code(), Some(0));
    for name in ["trajectory.csv", "tube.csv"] {
        let path = dir.path().join(name);
        let original = std::fs::read(&path).unwrap();
        let mut again = Vec::new();
        Table::read(&path).unwrap().to_writer(&mut again).unwrap();
        assert_eq!(original, again, "{name}");
    }
}

#[test]
fn closed_loop_writes_traces_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cl.json",
        r#"{"experiment": "closed_loop", "closed_loop": {"n_steps": 15, "runs": 2}}"#,
    );
    let out = zoro(&["closed-loop", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [4, 5] {
        let t = Table::read(&dir.path().join(format!("closed_loop_{seed}.csv"))).unwrap();
        assert_eq!(t.rows.len(), 15);
        assert!(dir.path().join(format!("closed_loop_{seed}.json")).exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("closed_loop_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], 2);
    assert_eq!(summary["collision_steps"], 0);
}
