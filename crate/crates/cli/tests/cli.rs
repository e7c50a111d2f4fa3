//! End-to-end tests of the `fedrate` binary: exit codes, machine-readable
//! error JSON, pinned CSV headers, and byte-identical manifest replays.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedrate");

/// Identical two-device instance whose sum rate at D = 1 is exactly
/// 1.5 bits and whose distortion floor is 0.5.
const WORKED_SPEC: &str = "P = 1\nK = 2\nsigma_X_sq = [1.0]\nsigma_N_sq = [[1.0], [1.0]]\nunit = \"bits\"\n";

/// Two devices with unequal noise (1 and 4); the rate pair (1.5, 0.5) bits
/// induces D = 1 exactly.
const TWO_DEVICE_SPEC: &str =
    "P = 1\nK = 2\nsigma_X_sq = [1.0]\nsigma_N_sq = [[1.0], [4.0]]\nunit = \"bits\"\n";

fn work_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-{name}"));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clear stale test dir");
    }
    std::fs::create_dir_all(&dir).expect("create test dir");
    dir
}

fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).expect("write test input");
    path
}

fn fedrate(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary launches")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

/// The machine-readable error object is the last stderr line.
fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .expect("stderr has content");
    serde_json::from_str(line)
        .unwrap_or_else(|e| panic!("last stderr line is not JSON ({e}): {line}"))
}

#[test]
fn sumrate_worked_instance_is_exact_json() {
    let dir = work_dir("sumrate-worked");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let out = fedrate(
        &dir,
        &["sumrate", "--spec", "spec.toml", "--d-total", "1.0", "--out", "result.json"],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert_eq!(json["sum_rate"], 1.5);
    assert_eq!(json["unit"], "bits");
    assert_eq!(json["method"], "closed_form");
    // The mirrored file matches stdout byte for byte.
    let mirrored = std::fs::read(dir.join("result.json")).expect("out file written");
    assert_eq!(mirrored, out.stdout);
    // A manifest appears at the default sibling path.
    assert!(dir.join("result.json.manifest.json").exists());
}

#[test]
fn sumrate_below_floor_exits_two_with_error_json() {
    let dir = work_dir("sumrate-floor");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let out = fedrate(&dir, &["sumrate", "--spec", "spec.toml", "--d-total", "0.5"]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr_error(&out);
    assert_eq!(err["error"], "DistortionBelowFloor");
    assert!(err["message"].as_str().expect("message").contains("floor"));
}

#[test]
fn sumrate_numeric_agrees_with_closed_form() {
    let dir = work_dir("sumrate-numeric");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let auto = fedrate(&dir, &["sumrate", "--spec", "spec.toml", "--d-total", "1.0"]);
    let numeric = fedrate(
        &dir,
        &["sumrate", "--spec", "spec.toml", "--d-total", "1.0", "--method", "numeric"],
    );
    assert_eq!(exit_code(&auto), 0);
    assert_eq!(exit_code(&numeric), 0);
    let a = stdout_json(&auto)["sum_rate"].as_f64().unwrap();
    let n = stdout_json(&numeric)["sum_rate"].as_f64().unwrap();
    assert_eq!(stdout_json(&numeric)["method"], "numeric");
    assert!((a - n).abs() < 1e-9, "closed form {a} vs numeric {n}");
}

#[test]
fn sumrate_in_nats_converts_the_unit() {
    let dir = work_dir("sumrate-nats");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let out = fedrate(
        &dir,
        &["sumrate", "--spec", "spec.toml", "--d-total", "1.0", "--unit", "nats"],
    );
    assert_eq!(exit_code(&out), 0);
    let json = stdout_json(&out);
    assert_eq!(json["unit"], "nats");
    let rate = json["sum_rate"].as_f64().unwrap();
    let expected = 1.5 * std::f64::consts::LN_2;
    assert!((rate - expected).abs() < 1e-12, "got {rate}, want {expected}");
}

#[test]
fn unknown_flag_exits_one_not_two() {
    let dir = work_dir("clap-exit");
    let out = fedrate(&dir, &["sumrate", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 1, "usage errors are validation errors");
    let err = stderr_error(&out);
    assert_eq!(err["error"], "InvalidInput");
}

#[test]
fn tradeoff_fifty_rows_strictly_decreasing() {
    let dir = work_dir("tradeoff-fifty");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let out = fedrate(
        &dir,
        &["tradeoff", "--spec", "spec.toml", "--d-grid", "0.6:2.0:50"],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).expect("utf8 csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("D,sum_rate_bits,per_dim_json"));
    let mut previous = f64::INFINITY;
    let mut rows = 0;
    for line in lines {
        // The first two columns are plain numbers; only per_dim_json may
        // contain quoted commas.
        let mut fields = line.splitn(3, ',');
        let d: f64 = fields.next().unwrap().parse().expect("D parses");
        let rate: f64 = fields.next().unwrap().parse().expect("sum rate parses");
        assert!(d > 0.0);
        assert!(
            rate < previous,
            "sum rate must strictly decrease along the grid (row {rows}: {rate} !< {previous})"
        );
        previous = rate;
        rows += 1;
    }
    assert_eq!(rows, 50);
}

#[test]
fn tradeoff_with_no_feasible_point_exits_two() {
    let dir = work_dir("tradeoff-infeasible");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    // The floor is 0.5; every grid point sits below it.
    let out = fedrate(
        &dir,
        &["tradeoff", "--spec", "spec.toml", "--d-grid", "0.1:0.4:4"],
    );
    assert_eq!(exit_code(&out), 2);
    assert_eq!(stderr_error(&out)["error"], "EmptyFeasibleGrid");
}

#[test]
fn plan_worked_instance_needs_six_iterations() {
    let dir = work_dir("plan-worked");
    let out = fedrate(
        &dir,
        &[
            "plan", "--epsilon", "1.0", "--A", "1.0", "--L", "1.0", "--K", "2", "--P", "1",
            "--sigma-x2", "1.0", "--sigma-n2", "1.0", "--d-grid", "2:2:1",
            "--curve-out", "curve.csv",
        ],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert_eq!(json["t"], 6);
    assert_eq!(json["d"], 2.0);
    assert_eq!(json["convention"], "per_dimension_D");
    let bound = json["achieved_bound"].as_f64().unwrap();
    assert!(bound <= 1.0, "bound {bound} must meet epsilon");
    // The active convention is announced on stderr.
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("d-convention: per_dimension_D"),
        "stderr: {stderr}"
    );
    let curve = std::fs::read_to_string(dir.join("curve.csv")).expect("curve written");
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("D,T,bits_per_iter,total_bits"));
    assert_eq!(lines.clone().count(), 1, "single-point grid yields one row");
    let row = lines.next().unwrap();
    assert!(row.starts_with("2,6,"), "row: {row}");
}

#[test]
fn plan_rejects_schedule_and_constants_together() {
    let dir = work_dir("plan-conflict");
    write_file(&dir, "sched.csv", "t,sigma_X_sq,sigma_N_sq\n1,1.0,1.0\n");
    let out = fedrate(
        &dir,
        &[
            "plan", "--epsilon", "1.0", "--A", "1.0", "--L", "1.0", "--K", "2", "--P", "1",
            "--sigma-x2", "1.0", "--sigma-n2", "1.0", "--schedule", "sched.csv",
            "--d-grid", "2:2:1",
        ],
    );
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error(&out)["error"], "InvalidInput");
}

#[test]
fn plan_accepts_a_stepwise_schedule_file() {
    let dir = work_dir("plan-schedule");
    write_file(
        &dir,
        "sched.csv",
        "t,sigma_X_sq,sigma_N_sq\n1,1.0,1.0\n4,0.25,1.0\n",
    );
    let out = fedrate(
        &dir,
        &[
            "plan", "--epsilon", "1.0", "--A", "1.0", "--L", "1.0", "--K", "2", "--P", "1",
            "--schedule", "sched.csv", "--d-grid", "0.8:4.0:9",
        ],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert!(json["t"].as_u64().unwrap() >= 1);
    assert!(json["total_bits"].as_f64().unwrap() > 0.0);
}

#[test]
fn region_check_accepts_the_worked_certificate() {
    let dir = work_dir("region-accept");
    write_file(&dir, "spec.toml", TWO_DEVICE_SPEC);
    write_file(
        &dir,
        "cert.json",
        r#"{"unit":"bits","R":[2.0,1.0],"D_p":[1.0],"D_total":1.0,"r_kp":[[1.5],[0.5]]}"#,
    );
    let out = fedrate(
        &dir,
        &["region-check", "--spec", "spec.toml", "--certificate", "cert.json"],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert_eq!(json["verdict"], "accept");
    assert!(json["decomposition"].is_array(), "accepts carry a split");
}

#[test]
fn region_check_rejects_an_undershooting_point() {
    let dir = work_dir("region-reject");
    write_file(&dir, "spec.toml", TWO_DEVICE_SPEC);
    write_file(
        &dir,
        "cert.json",
        r#"{"unit":"bits","R":[1.0,1.0],"D_total":1.0,"r_kp":[[1.5],[0.5]]}"#,
    );
    let out = fedrate(
        &dir,
        &["region-check", "--spec", "spec.toml", "--certificate", "cert.json"],
    );
    assert_eq!(exit_code(&out), 0, "a completed check exits 0 either way");
    let json = stdout_json(&out);
    assert_eq!(json["verdict"], "reject");
    assert!(!json["violations"].as_array().unwrap().is_empty());
}

#[test]
fn region_check_strict_requires_a_split() {
    let dir = work_dir("region-strict");
    write_file(&dir, "spec.toml", TWO_DEVICE_SPEC);
    write_file(
        &dir,
        "cert.json",
        r#"{"unit":"bits","R":[2.0,1.0],"D_total":1.0,"r_kp":[[1.5],[0.5]]}"#,
    );
    let out = fedrate(
        &dir,
        &["region-check", "--spec", "spec.toml", "--certificate", "cert.json", "--strict"],
    );
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error(&out)["error"], "CertificateMissing");
}

#[test]
fn simulate_ceo_report_matches_prediction() {
    let dir = work_dir("simulate-ceo");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let out = fedrate(
        &dir,
        &[
            "simulate-ceo", "--spec", "spec.toml", "--d-total", "1.0", "--n", "20000",
            "--seed", "3", "--csv-out", "mc.csv",
        ],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    let reports = json.as_array().expect("array of per-dimension reports");
    assert_eq!(reports.len(), 1);
    let report = &reports[0];
    for key in [
        "dimension",
        "n",
        "seed",
        "empirical_mse",
        "ci",
        "bias_slope",
        "bias_intercept",
        "predicted_mse",
    ] {
        assert!(report.get(key).is_some(), "report is missing {key}");
    }
    let mse = report["empirical_mse"].as_f64().unwrap();
    let ci = report["ci"].as_f64().unwrap();
    let predicted = report["predicted_mse"].as_f64().unwrap();
    assert!((mse - predicted).abs() <= ci, "|{mse} - {predicted}| > {ci}");
    let csv = std::fs::read_to_string(dir.join("mc.csv")).expect("csv written");
    assert!(csv.starts_with("dimension,n,seed,empirical_mse,ci,bias_slope,bias_intercept,predicted_mse\n"));
}

#[test]
fn simulate_fl_trace_has_pinned_columns() {
    let dir = work_dir("simulate-fl");
    let out = fedrate(
        &dir,
        &[
            "simulate-fl", "--problem", "quadratic", "--P", "2", "--K", "2",
            "--estimator", "mean", "--T", "6", "--seeds", "2", "--out", "trace.csv",
        ],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert!(json["mean_averaged_subopt"].as_f64().unwrap().is_finite());
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.join("trace.csv")).expect("trace written");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,loss,subopt,realized_var,bits"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5, "row {i}: {row}");
        assert_eq!(fields[0], (i + 1).to_string(), "iterations are 1-based");
        // An error-free sample mean transmits no description, so the bits
        // column prices it at zero.
        assert_eq!(fields[4], "0", "row {i} bits: {row}");
    }
}

#[test]
fn rerun_reproduces_outputs_byte_for_byte() {
    let dir = work_dir("rerun");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let first = fedrate(
        &dir,
        &["tradeoff", "--spec", "spec.toml", "--d-grid", "0.6:2.0:25", "--out", "sweep.csv"],
    );
    assert_eq!(exit_code(&first), 0);
    let manifest_path = dir.join("sweep.csv.manifest.json");
    let sweep_before = std::fs::read(dir.join("sweep.csv")).expect("sweep written");
    let manifest_before = std::fs::read(&manifest_path).expect("manifest written");

    // Clobber the output, then replay from the manifest alone.
    std::fs::write(dir.join("sweep.csv"), b"garbage").unwrap();
    let replay = fedrate(&dir, &["rerun", "--manifest", "sweep.csv.manifest.json"]);
    assert_eq!(exit_code(&replay), 0, "stderr: {}", String::from_utf8_lossy(&replay.stderr));

    let sweep_after = std::fs::read(dir.join("sweep.csv")).unwrap();
    let manifest_after = std::fs::read(&manifest_path).unwrap();
    assert_eq!(sweep_before, sweep_after, "regenerated CSV differs");
    assert_eq!(manifest_before, manifest_after, "rewritten manifest differs");
}

#[test]
fn rerun_reproduces_randomized_runs_too() {
    let dir = work_dir("rerun-mc");
    write_file(&dir, "spec.toml", WORKED_SPEC);
    let first = fedrate(
        &dir,
        &[
            "simulate-ceo", "--spec", "spec.toml", "--d-total", "1.0", "--n", "5000",
            "--seed", "11", "--out", "mc.json",
        ],
    );
    assert_eq!(exit_code(&first), 0);
    let before = std::fs::read(dir.join("mc.json")).unwrap();
    std::fs::remove_file(dir.join("mc.json")).unwrap();
    let replay = fedrate(&dir, &["rerun", "--manifest", "mc.json.manifest.json"]);
    assert_eq!(exit_code(&replay), 0);
    let after = std::fs::read(dir.join("mc.json")).unwrap();
    assert_eq!(before, after, "Monte Carlo replay must be byte-identical");
    assert_eq!(before, replay.stdout, "stdout matches the mirrored file");
}
