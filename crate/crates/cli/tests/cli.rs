use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bonus_malus_cli::figures::parse_columns;
use serde_json::Value;

fn table1() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table1.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bonus-malus"))
        .args(args)
        .env_remove("BONUS_MALUS_MC_SEED")
        .env_remove("BONUS_MALUS_MC_N_PATHS")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_key_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = table1();
    cfg["model"].as_object_mut().unwrap().remove("lambda");
    let path = write_config(dir.path(), &cfg);
    let out = run(&["solve", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.lambda"));
}

#[test]
fn unknown_key_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = table1();
    cfg["grid"]["hx"] = 0.1.into();
    let path = write_config(dir.path(), &cfg);
    let out = run(&["figures", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.hx"));
}

#[test]
fn cfl_violation_is_reported_by_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = table1();
    cfg["grid"]["h_t"] = 0.1.into();
    cfg["grid"]["h_x"] = 0.05.into();
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let out = run(&["check", s(&path), "--out", s(&out_dir)]);
    assert_ne!(out.status.code(), Some(0));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("check_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
    assert_eq!(report["config_error"]["criterion"], "cfl");
    assert!(String::from_utf8_lossy(&out.stdout).contains("cfl"));
}

#[test]
fn bad_policy_argument_is_rejected() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table1.json");
    let out = run(&["simulate", s(&path), "--policy", "const:-1", "--init", "1,0,0,2.5"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn simulate_honours_env_overrides() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table1.json");
    let out = Command::new(env!("CARGO_BIN_EXE_bonus-malus"))
        .args(["simulate", s(&path), "--policy", "const:0", "--init", "2,0,0,2.5"])
        .env("BONUS_MALUS_MC_SEED", "7")
        .env("BONUS_MALUS_MC_N_PATHS", "2000")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["n_paths"], 2000);
    assert!(report["mean"].as_f64().unwrap() < 0.0);
}

/// A coarse, short configuration keeps the solve fast.
fn coarse() -> Value {
    let mut cfg = table1();
    cfg["grid"]["h_t"] = 0.1.into();
    cfg["grid"]["h_x"] = 0.1.into();
    cfg
}

#[test]
fn figures_are_consistent_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &coarse());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = run(&["figures", s(&path), "--out", s(out)]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    }
    for name in ["fig1.csv", "fig2.csv", "fig3.csv", "fig4a.csv", "fig4b.csv", "run_meta.json"] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name} differs between runs");
    }
    let read = |n: &str| parse_columns(&std::fs::read_to_string(a.join(n)).unwrap());
    let fig2 = read("fig2.csv");
    let h5 = -(-0.5f64 * 5.0).exp();
    let last = fig2[0].len() - 1;
    assert_eq!(fig2[0][last], 5.0);
    assert!((fig2[1][last] - h5).abs() < 1e-11 && (fig2[2][last] - h5).abs() < 1e-11);
    // class 2 at s = S equals class 1 at s = 0, on the same layer t = S
    let fig3 = read("fig3.csv");
    let n = fig3[0].len() - 1;
    assert_eq!(fig3[2][n], fig3[1][0]);
    let header = std::fs::read_to_string(a.join("fig1.csv")).unwrap();
    assert!(header.starts_with("x,V1,V2\n"));
}

#[test]
fn solve_writes_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &coarse());
    let out = dir.path().join("solve");
    let res = run(&["solve", s(&path), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let values = std::fs::read_to_string(out.join("value_field.csv")).unwrap();
    assert!(values.starts_with("class,t,s,x,value\n"));
    let barriers = std::fs::read_to_string(out.join("barrier_field.csv")).unwrap();
    assert!(barriers.starts_with("class,t,s,x,barrier\n"));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("solve_summary.json")).unwrap()).unwrap();
    assert!(summary["iterations"].as_u64().unwrap() > 0);
}
