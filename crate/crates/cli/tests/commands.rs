use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hjb_core::io::read_value_function;
use hjb_core::presets::reference_lq_1d;
use serde_json::Value;

fn hjbctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjbctl"))
        .args(args)
        .output()
        .expect("hjbctl runs")
}

fn write_problem(dir: &Path, doc: &Value) -> PathBuf {
    let path = dir.join("lq1d.json");
    std::fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path
}

fn lq1d(dir: &Path) -> PathBuf {
    write_problem(dir, &serde_json::to_value(reference_lq_1d()).unwrap())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_writes_a_zero_terminal_slice() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let out = dir.path().join("out");
    let o = hjbctl(&["solve", "-p", s(&problem), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let vf = read_value_function(&out.join("value.json"), &out.join("value.csv")).unwrap();
    assert_eq!(vf.values.len(), 101);
    assert!(vf.values[100].iter().all(|&v| v == 0.0));
    for name in ["policy.json", "policy.csv", "solve_report.json", "manifest.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["seed"], 0);
    assert_eq!(manifest["config"]["n_paths"], 100_000);
    assert_eq!(manifest["exit_status"], 0);
    assert_eq!(manifest["problem"]["grid"]["n_points"][0], 201);
}

#[test]
fn verify_is_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = hjbctl(&[
            "verify", "-p", s(&problem), "-o", s(&out), "--seed", "7", "--n-paths", "4000",
            "--workers", workers,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
        std::fs::read(out.join("verify.json")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "4");
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["x0"], serde_json::json!([0.0]));
    let names: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "terminal_slice_zero",
            "riccati_oracle",
            "action_identity",
            "bellman_split_0.25",
            "bellman_split_0.5",
            "bellman_split_0.75"
        ]
    );
}

#[test]
fn failed_checks_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let out = dir.path().join("out");
    // five nodes on [-3, 3] are far too coarse for the oracle tolerance
    let o = hjbctl(&[
        "verify", "-p", s(&problem), "-o", s(&out), "--n-paths", "500", "--x0", "1",
        "--set", "grid.n_points=[5]",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let report = read_json(&out.join("verify.json"));
    assert_eq!(report["passed"], false);
    assert_eq!(report["checks"][1]["status"], "fail");
    assert_eq!(read_json(&out.join("manifest.json"))["exit_status"], 1);
}

#[test]
fn moments_mean_matches_drift() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let out = dir.path().join("out");
    let o = hjbctl(&["moments", "-p", s(&problem), "-o", s(&out), "--u", "1", "--dtau", "0.01"]);
    assert_eq!(o.status.code(), Some(0));
    let m = read_json(&out.join("moments.json"));
    let mean = m["mean_increment"][0].as_f64().unwrap();
    let se = m["mean_std_error"][0].as_f64().unwrap();
    assert!((mean - 0.01).abs() <= 5.0 * se, "{mean} ± {se}");
    assert_eq!(m["n_samples"], 100_000);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["dtau"], 0.01);
}

#[test]
fn simulate_dumps_every_path() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let out = dir.path().join("out");
    let o = hjbctl(&[
        "simulate", "-p", s(&problem), "-o", s(&out), "--n-paths", "20", "--x0", "1",
        "--dump-paths", "--set", "horizon.n_steps=10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ens = read_json(&out.join("ensemble.json"));
    assert_eq!(ens["n_paths"], 20);
    assert_eq!(ens["x0"], serde_json::json!([1.0]));
    let csv = std::fs::read_to_string(out.join("paths.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 * 11);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["problem"]["horizon"]["n_steps"], 10);
    assert_eq!(manifest["config"]["overrides"][0], "horizon.n_steps=10");
}

#[test]
fn parse_errors_exit_with_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let out = dir.path().join("out");
    let o = hjbctl(&["solve", "-p", s(&problem), "-o", s(&out), "--set", "horizon.n_steps=ten"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon.n_steps"));
    assert!(out.join("manifest.json").is_file());

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ \"dim\": 1,").unwrap();
    assert_eq!(hjbctl(&["solve", "-p", s(&broken), "-o", s(&out)]).status.code(), Some(2));
    assert_eq!(hjbctl(&["solve", "-o", s(&out)]).status.code(), Some(2));
}

#[test]
fn invalid_problems_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let out = dir.path().join("out");
    let o = hjbctl(&["solve", "-p", s(&problem), "-o", s(&out), "--set", "noise.sigma=[-1]"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("noise.sigma"));
    let o = hjbctl(&["simulate", "-p", s(&problem), "-o", s(&out), "--x0", "1,2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.join("value.csv").exists());
}

#[test]
fn missing_files_exit_with_five() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("absent.json");
    assert_eq!(hjbctl(&["solve", "-p", s(&missing), "-o", s(&out)]).status.code(), Some(5));
}

#[test]
fn numeric_failures_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let problem = lq1d(dir.path());
    let out = dir.path().join("out");
    let o = hjbctl(&["moments", "-p", s(&problem), "-o", s(&out), "--dtau", "-0.01"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}
