use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "data", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn qsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsd")).args(args).output().expect("binary runs")
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)))
}

fn schema_errors(v: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(qsd_core::report::REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    validator.iter_errors(v).map(|e| format!("{e} at {}", e.instance_path)).collect()
}

fn close(v: &Value, want: f64, tol: f64) -> bool {
    v.as_f64().is_some_and(|x| (x - want).abs() <= tol)
}

#[test]
fn chain_a_certificate() {
    let out = qsd(&["qsd", &data("chain_a.chain")]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    let c = &r["certificate"];
    assert_eq!(c["theta_bar"].as_f64(), Some(0.5));
    assert_eq!(c["j"], serde_json::json!([0, 1]));
    assert!(close(&c["eta"][0][0], 1.0, 1e-9) && close(&c["eta"][0][1], 0.6, 1e-9), "{}", c["eta"]);
    assert_eq!(c["nu"], serde_json::json!([[1.0, 0.0]]));
}

#[test]
fn chain_a_verifies() {
    let out = qsd(&["verify", &data("chain_a.chain"), "--n", "4000"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let r = report(&out);
    assert_eq!(r["verification"]["j_hat"], serde_json::json!([0, 1]));
    assert!(r["verification"]["monte_carlo"].is_null());
}

#[test]
fn malformed_row_is_named() {
    let out = qsd(&["qsd", &data("row_sum.chain")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 1") && err.contains("line 3"), "{err}");
}

#[test]
fn input_errors_exit_one() {
    assert_eq!(qsd(&["qsd", &data("missing.chain")]).status.code(), Some(1));
    assert_eq!(qsd(&["verify", &data("chain_a.chain"), "--n", "x"]).status.code(), Some(1));
    assert_eq!(qsd(&["operator-lab", "--case", "4"]).status.code(), Some(1));
    assert_eq!(qsd(&["frobnicate"]).status.code(), Some(1));
    let out = qsd(&["lyapunov", &data("broken.rules")]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2, column 7"), "{err}");
    assert_eq!(qsd(&["lyapunov", &data("downward.rules"), "--V", "pow(1.5,"]).status.code(), Some(1));
    assert_eq!(qsd(&["lyapunov", &data("downward.rules"), "--N", "100"]).status.code(), Some(1));
    assert_eq!(qsd(&["--help"]).status.code(), Some(0));
}

#[test]
fn periodic_leading_class_is_a_check_failure() {
    let out = qsd(&["qsd", &data("periodic.chain")]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(&out);
    assert_eq!(r["status"], "fail");
    assert!(r["diagnostics"][0].as_str().unwrap().contains("period 2"), "{}", r["diagnostics"]);
    assert!(schema_errors(&r).is_empty());
}

#[test]
fn reports_are_byte_identical() {
    let runs: [&[&str]; 4] = [
        &["verify", &data("chain_a.chain"), "--n", "500", "--samples", "100000", "--seed", "7"],
        &["analyze", &data("chain_d.chain")],
        &["operator-lab", "--case", "2", "--seed", "3", "--instances", "10"],
        &["lyapunov", &data("downward.rules"), "--N", "50,100"],
    ];
    for args in runs {
        let a = qsd(args);
        let b = qsd(args);
        assert!(!a.stdout.is_empty());
        assert_eq!(a.stdout, b.stdout, "{args:?}");
    }
}

#[test]
fn every_command_matches_the_schema() {
    let runs: [&[&str]; 9] = [
        &["analyze", &data("chain_a.chain")],
        &["qsd", &data("chain_a.chain")],
        &["qsd", &data("chain_d.chain")],
        &["verify", &data("chain_a.chain"), "--n", "400", "--samples", "20000"],
        &["operator-lab", "--case", "1", "--instances", "5"],
        &["operator-lab", "--case", "2", "--instances", "5"],
        &["operator-lab", "--case", "3", "--instances", "5"],
        &["lyapunov", &data("downward.rules"), "--N", "50,100"],
        &["lyapunov", &data("upward.rules"), "--N", "50,100"],
    ];
    for args in runs {
        let r = report(&qsd(args));
        let errors = schema_errors(&r);
        assert!(errors.is_empty(), "{args:?}: {errors:?}");
        assert_eq!(r["schema_version"], 1);
    }
}

#[test]
fn schema_rejects_broken_reports() {
    let good = report(&qsd(&["qsd", &data("chain_a.chain")]));
    let mut bad = good.clone();
    bad["status"] = "ok".into();
    assert!(!schema_errors(&bad).is_empty());
    let mut bad = good.clone();
    bad.as_object_mut().unwrap().remove("certificate");
    assert!(!schema_errors(&bad).is_empty());
    let mut bad = good;
    bad["provenance"]["input_sha256"] = "xyz".into();
    assert!(!schema_errors(&bad).is_empty());
}

#[test]
fn floats_keep_seventeen_digits() {
    let out = qsd(&["qsd", &data("chain_a.chain")]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"theta_bar\": 5.0000000000000000e-1"));
    assert!(text.contains("5.9999999999999998e-1"));
}

#[test]
fn file_weights_reach_the_certificate() {
    let r = report(&qsd(&["qsd", &data("chain_d.chain")]));
    assert_eq!(r["certificate"]["j"], serde_json::json!([0, 1, 2]));
    assert_eq!(r["certificate"]["file_weight_norms"][0].as_f64(), Some(1.0));
}

#[test]
fn monte_carlo_section_and_seed() {
    let r = report(&qsd(&["verify", &data("chain_a.chain"), "--n", "400", "--samples", "200000", "--seed", "5"]));
    let mc = &r["verification"]["monte_carlo"];
    assert_eq!(mc["run"]["seed"], 5);
    assert_eq!(mc["run"]["x"], 1);
    assert_eq!(r["provenance"]["seeds"], serde_json::json!([5]));
    assert_eq!(r["provenance"]["input_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn drift_directions() {
    let down = qsd(&["lyapunov", &data("downward.rules"), "--N", "100,200,400"]);
    let r = report(&down);
    assert_eq!(r["stability"]["stable"], "pass");
    assert!(r["stability"]["pairs"][1]["nu_distance"].as_f64().unwrap() <= 1e-8);
    // The interior drift ratio 0.2 * 1.5 + 0.7 / 1.5 exceeds the rate 0.75.
    assert!(close(&r["lyapunov"]["tail_sup"], 0.3 + 0.7 / 1.5, 1e-12));
    assert_eq!(r["lyapunov"]["drift"], "fail");
    assert_eq!(down.status.code(), Some(2));

    let up = qsd(&["lyapunov", &data("upward.rules")]);
    assert_eq!(up.status.code(), Some(2));
    let r = report(&up);
    assert_eq!(r["stability"]["stable"], "fail");
    assert!(r["diagnostics"].as_array().unwrap().iter().any(|d| d.as_str().unwrap().contains("mass escapes")));
}
