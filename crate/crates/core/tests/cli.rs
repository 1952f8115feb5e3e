mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::manifest_path;
use serde_json::Value;

fn aggsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggsplit")).args(args).output().expect("binary runs")
}

fn data(name: &str) -> String {
    manifest_path(&format!("data/{name}")).display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_exit_codes() {
    let ok = aggsplit(&["validate", &data("two_agent.json")]);
    assert_eq!(ok.status.code(), Some(0));
    let bad = aggsplit(&["validate", &data("disconnected.json")]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&bad.stdout).to_string() + &String::from_utf8_lossy(&bad.stderr);
    assert!(text.contains("DisconnectedGraph"), "{text}");
    assert_eq!(aggsplit(&["validate", &data("malformed.json")]).status.code(), Some(2));
}

#[test]
fn run_reaches_the_oracle_and_writes_a_consistent_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let summary = dir.path().join("summary.json");
    let out = aggsplit(&[
        "run",
        &data("two_agent.json"),
        "--oracle-compare",
        "--trace",
        trace.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let s = json(&summary);
    assert_eq!(s["converged"], Value::Bool(true));
    assert!(s["rel_dist_to_oracle"].as_f64().unwrap() <= 1e-4);

    let mut rows = csv::Reader::from_path(&trace).unwrap();
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len() as u64, s["iterations"].as_u64().unwrap());
    let last_c: f64 = records.last().unwrap()[3].parse().unwrap();
    assert_eq!(last_c, s["constraint_violation"].as_f64().unwrap());
}

#[test]
fn zero_iterations_is_a_failure() {
    let out = aggsplit(&["run", &data("two_agent.json"), "--max-iter", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s["iterations"], 0);
    assert_eq!(s["converged"], Value::Bool(false));
}

#[test]
fn invalid_input_to_run_is_an_input_error() {
    assert_eq!(aggsplit(&["run", &data("malformed.json")]).status.code(), Some(2));
    assert_eq!(aggsplit(&["run", &data("two_agent.json"), "--check-equivalence"]).status.code(), Some(2));
}

#[test]
fn oracle_subcommand_reports_the_analytic_solution() {
    let out = aggsplit(&["oracle", &data("two_agent.json")]);
    assert_eq!(out.status.code(), Some(0));
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    for x in rep["x"].as_array().unwrap() {
        assert!((x[0].as_f64().unwrap() - 0.5).abs() < 1e-9);
    }
    assert!((rep["multiplier"][0].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn simulated_mode_passes_the_equivalence_check() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("messages.jsonl");
    let out = aggsplit(&[
        "bench",
        &data("grid3x3.json"),
        "--mode",
        "simulated",
        "--check-equivalence",
        "--log-messages",
        log.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("summary.json"));
    let lines = std::fs::read_to_string(&log).unwrap().lines().count() as u64;
    // 13 messages per edge per round on a 4-edge graph
    assert_eq!(lines, 52 * s["iterations"].as_u64().unwrap());
}

#[test]
fn bench_outputs_are_byte_identical_across_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = aggsplit(&["bench", &data("grid3x3.json"), "--seed", "4", "--out-dir", d.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    for file in ["trace.csv", "summary.json", "allocation.json"] {
        let a = std::fs::read(dirs[0].path().join(file)).unwrap();
        let b = std::fs::read(dirs[1].path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let s = json(&dirs[0].path().join("summary.json"));
    assert!(s["constraint_violation"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn twenty_nine_market_bench_completes() {
    let dir = tempfile::tempdir().unwrap();
    let out = aggsplit(&["bench", &data("markets29.json"), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(matches!(out.status.code(), Some(0 | 1)));
    let s = json(&dir.path().join("summary.json"));
    for key in ["iterations", "kkt_residual", "constraint_violation", "consensus_gap", "tracking_gap"] {
        assert!(s[key].is_number(), "{key}");
    }
    let alloc = json(&dir.path().join("allocation.json"));
    assert_eq!(alloc["branches"].as_array().unwrap().len(), 5);
}
