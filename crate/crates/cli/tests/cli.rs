use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-lpv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("SPARSE_LPV_SOLVER_TOL")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 4] = ["--set", "wing.n=2", "--set", "sim.horizon=5"];

#[test]
fn model_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["model"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = json(&dir.path().join("model.json"));
    assert_eq!((m["n_x"].as_u64(), m["n_u"].as_u64(), m["n_rho"].as_u64()), (Some(10), Some(5), Some(5)));

    let o = run(&["model", "--set", "wing.n=1"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(json(&dir.path().join("model.json"))["n_x"].as_u64(), Some(2));

    for args in [vec!["model", "--model", "lti"], vec!["model", "--set", "wing.k2=0"]] {
        assert_eq!(code(&run(&args, dir.path())), 0);
        let m = json(&dir.path().join("model.json"));
        let a = m["matrices"]["A"].as_array().unwrap();
        assert_eq!(a.len(), 6);
        let zero = |v: &Value| v.as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).all(|x| x.as_f64() == Some(0.0));
        assert!(a[1..].iter().all(zero), "{args:?}");
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["model", "--set", "wing.bars=3"],
        vec!["model", "--set", "wing.n"],
        vec!["model", "--set", "wing.m=-1"],
        vec!["model", "--config", "/nonexistent/config.json"],
        vec!["frobnicate"],
        vec!["design", "--kind", "h3"],
        vec!["simulate"],
    ] {
        let o = run(&args, dir.path());
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
    }
    let o = Command::new(env!("CARGO_BIN_EXE_sparse-lpv"))
        .args(["model", "--out"])
        .arg(dir.path())
        .env("SPARSE_LPV_SOLVER_TOL", "tight")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("SPARSE_LPV_SOLVER_TOL"));
}

#[test]
fn unattainable_performance_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["design", "--model", "lti", "--gamma0", "1e-3", "--set", "wing.n=2"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("infeasible") && stderr(&o).contains("constraint C"), "{}", stderr(&o));

    let model = r#"{"n_x":1,"n_u":1,"n_w":1,"n_z":1,"n_rho":0,"box":{"lower":[],"upper":[]},
        "matrices":{"A":[[[-1.0]]],"B_u":[[[1.0]]],"B_w":[[[1.0]]],"C_z":[[[1.0]]],"D_u":[[[0.0]]],"D_w":[[[1.0]]]}}"#;
    let path = dir.path().join("feedthrough.json");
    fs::write(&path, model).unwrap();
    let set = format!("model_file=\"{}\"", path.display());
    let o = run(&["design", "--gamma0", "0.5", "--set", &set], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn h2_with_feedthrough_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = r#"{"n_x":1,"n_u":1,"n_w":1,"n_z":1,"n_rho":0,"box":{"lower":[],"upper":[]},
        "matrices":{"A":[[[-1.0]]],"B_u":[[[1.0]]],"B_w":[[[1.0]]],"C_z":[[[1.0]]],"D_u":[[[0.0]]],"D_w":[[[0.5]]]}}"#;
    let path = dir.path().join("custom.json");
    fs::write(&path, model).unwrap();
    let set = format!("model_file=\"{}\"", path.display());
    let o = run(&["design", "--kind", "h2", "--set", &set], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("D_w"), "{}", stderr(&o));
}

#[test]
fn design_simulate_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base: Vec<&str> = SMALL.iter().copied().chain(["--gamma0", "0.3"]).collect();
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(&base).map(|s| s.to_string()).collect() };
    let args = with(&["design", "--set", "dump_problem=true"]);
    let o = run(&args.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["controller.json", "iterations.csv", "certificate.json", "problem.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(json(&dir.path().join("certificate.json"))["pass"], Value::Bool(true));
    let ctrl = dir.path().join("controller.json").display().to_string();

    let args = with(&["verify", "--controller", &ctrl]);
    let o = run(&args.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("norm_report.csv")).unwrap();
    assert!(report.starts_with("rho_1,rho_2,sample,stable,channel,norm,bound,margin,pass"));

    let args = with(&["simulate", "--controller", &ctrl]);
    let o = run(&args.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = json(&dir.path().join("metrics.json"));
    assert_eq!(metrics["metrics"]["u_inf"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["in_box"], Value::Bool(true));
    let header = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(header.starts_with("t,theta_1,theta_2,thetadot_1,thetadot_2,u_1,u_2,w_1,w_2,box_violation\n"));
}

#[test]
fn open_loop_simulation_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args: Vec<&str> = ["simulate", "--open-loop", "--seed", "42"].iter().chain(&SMALL).copied().collect();
    assert_eq!(code(&run(&args, a.path())), 0);
    assert_eq!(code(&run(&args, b.path())), 0);
    let ta = fs::read(a.path().join("trajectory.csv")).unwrap();
    assert_eq!(ta, fs::read(b.path().join("trajectory.csv")).unwrap());
    assert_eq!(fs::read(a.path().join("metrics.json")).unwrap(), fs::read(b.path().join("metrics.json")).unwrap());
    let header = String::from_utf8(ta).unwrap();
    let header = header.lines().next().unwrap();
    assert!(!header.contains("u_1"));
    assert_eq!(json(&a.path().join("metrics.json"))["metrics"]["u_inf"], serde_json::json!([0.0, 0.0]));

    let args: Vec<&str> = ["simulate", "--open-loop", "--seed", "43"].iter().chain(&SMALL).copied().collect();
    assert_eq!(code(&run(&args, b.path())), 0);
    assert_ne!(fs::read(a.path().join("trajectory.csv")).unwrap(), fs::read(b.path().join("trajectory.csv")).unwrap());
}

#[test]
fn default_sweep_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let args: Vec<&str> = ["sweep", "--set", "sweep.gamma0=[0.5]"].iter().chain(&SMALL).copied().collect();
    let o = run(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for r in &rows {
        assert_eq!(r[col("exit_code")], "0");
        if r[col("gamma_ub_sqrt")] == "8" {
            for i in 1..=2 {
                let g: f64 = r[col(&format!("sqrt_gamma_{i}"))].parse().unwrap();
                assert!(g <= 8.0 * (1.0 + 1e-6));
            }
        }
    }
    let models: Vec<&str> = rows.iter().map(|r| r[col("model")]).collect();
    assert_eq!(models.iter().filter(|m| **m == "lti").count(), 4);
    let comparison = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 5);
}
