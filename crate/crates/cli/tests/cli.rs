use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bottleneck(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bottleneck"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn last_row(csv: &str) -> Vec<f64> {
    csv.lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn simulate_constant_reaches_steady_state() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "sig.toml", "kind = \"constant\"\nlevel = 3.0\n");
    let out = bottleneck(&["simulate", "--signal", "sig.toml", "--lambda", "2", "--out", "traj.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,x,sigma,cumulative_x");
    let row = last_row(&csv);
    assert!((row[0] - 10.0).abs() < 1e-12);
    assert!((row[1] - 0.6).abs() < 1e-6);
}

#[test]
fn simulate_zero_signal_decays() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        "command = \"simulate\"\nlambda = 0.5\nx0 = 1.0\nhorizon = 4.0\n[signal]\nkind = \"constant\"\nlevel = 0.0\n",
    );
    let out = bottleneck(&["simulate", "--config", "run.toml"], dir.path());
    assert!(out.status.success());
    let row = last_row(&String::from_utf8(out.stdout).unwrap());
    assert!((row[1] - (-2.0f64).exp()).abs() < 1e-15);
}

#[test]
fn malformed_config_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", "lambda = 1.0\nhorizn = 3\n");
    let out = bottleneck(&["simulate", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 2"), "{err}");

    write(dir.path(), "neg.toml", "lambda = -1.0\n[signal]\nkind = \"constant\"\nlevel = 1.0\n");
    assert_eq!(bottleneck(&["simulate", "--config", "neg.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(bottleneck(&["simulate", "--lambda", "1"], dir.path()).status.code(), Some(2));
    assert_eq!(bottleneck(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn periodic_reports_lemma_gap() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "sig.toml",
        "kind = \"piecewise_constant\"\nbreakpoints = [0.0, 1.0, 2.0]\nlevels = [0.0, 2.0]\n",
    );
    let out = bottleneck(&["periodic", "--signal", "sig.toml", "--lambda", "1"], dir.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let report = &v["report"];
    assert_eq!(report["sigma_bar"].as_f64().unwrap(), 1.0);
    assert!(report["gap"].as_f64().unwrap() > 0.0);
    assert!(report["residual_lemma"].as_f64().unwrap() <= 1e-8);
    assert_eq!(v["provenance"]["signal"]["kind"], "piecewise_constant");
}

#[test]
fn verify_default_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = bottleneck(&["verify", "--seed", "11", "--out", "a.json"], dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = bottleneck(&["verify", "--seed", "11", "--out", "b.json"], dir.path());
    assert_eq!(b.status.code(), Some(0));
    let ja = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(ja, fs::read(dir.path().join("b.json")).unwrap());
    let v: Value = serde_json::from_slice(&ja).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["seed"], 11);
    let counts = v["histograms"]["residual_lemma"]["counts"].as_array().unwrap();
    assert_eq!(counts.iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 500);
}

#[test]
fn tiny_tolerance_fails_and_replays_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let out = bottleneck(&["verify", "--seed", "4", "--tolerance", "1e-15", "--out", "v.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&fs::read(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
    let failure = v["failures"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["suite"] == "periodic")
        .unwrap();
    write(dir.path(), "replay.json", &serde_json::to_string(&failure["replay"]).unwrap());
    let replay = bottleneck(&["verify", "--config", "replay.json", "--out", "r.json"], dir.path());
    assert_eq!(replay.status.code(), Some(1));
    let r: Value = serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    let replayed = &r["failures"][0];
    assert_eq!(replayed["failures"], failure["failures"]);
    assert_eq!(r["cases"][0]["periodic"]["case"]["signal"], failure["replay"]["signal"]);
}

#[test]
fn asymptotic_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        "lambda = 1.0\nhorizon = 200.0\ncheckpoints = 16\n[signal]\nkind = \"clipped_sinusoid_sum\"\nmean = 1.0\namplitudes = [0.8, 0.6]\nfrequencies = [1.0, 1.4142135623730951]\n",
    );
    let out = bottleneck(&["asymptotic", "--config", "run.toml", "--out", "avg.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("avg.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "tau,mean_input,mean_state,lhs,rhs,slack");
    assert_eq!(csv.lines().count(), 17);
    let v: Value = serde_json::from_slice(&fs::read(dir.path().join("avg.json")).unwrap()).unwrap();
    assert_eq!(v["theorem2"]["violated"], false);
    assert!(v["min_certificate_slack"].as_f64().unwrap() >= -1e-9);
}

fn optimize(dir: &Path, body: &str) -> (Output, Value) {
    write(dir, "opt.toml", body);
    let out = bottleneck(&["optimize", "--config", "opt.toml", "--out", "opt.json"], dir);
    let v = serde_json::from_slice(&fs::read(dir.join("opt.json")).unwrap()).unwrap();
    (out, v)
}

#[test]
fn optimize_bang_bang_stays_below_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let (out, v) = optimize(
        dir.path(),
        "lambda = 1.0\nmean = 1.0\nseed = 3\nstarts = 4\n[family]\nfamily = \"bang_bang\"\nperiod = 1.0\n",
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(v["optimality_gap"].as_f64().unwrap() >= -1e-9);
    assert!(v["max_excess"].as_f64().unwrap() <= 1e-9);
    let best = &v["best_params"];
    assert!((best["low"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    let log = fs::read_to_string(dir.path().join("opt.evaluations.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "low,high,duty,mean,w,benchmark,gap");
    assert_eq!(log.lines().count() as u64, 1 + v["evaluations"].as_u64().unwrap());
}

#[test]
fn optimize_single_segment_and_skewed_regime() {
    let dir = tempfile::tempdir().unwrap();
    let (out, v) = optimize(
        dir.path(),
        "lambda = 1.0\nmean = 1.0\nstarts = 2\n[family]\nfamily = \"piecewise_constant_free\"\nperiod = 1.0\nsegments = 1\n",
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(v["optimality_gap"].as_f64().unwrap(), 0.0);

    let (out, v) = optimize(
        dir.path(),
        "lambda = 10.0\nmean = 0.1\nstarts = 3\n[family]\nfamily = \"piecewise_constant_free\"\nperiod = 1.0\nsegments = 4\n",
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(v["optimality_gap"].as_f64().unwrap() >= 0.0);
}

#[test]
fn optimize_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let body = "lambda = 1.0\nmean = 2.0\nseed = 9\nstarts = 3\n[family]\nfamily = \"piecewise_constant_free\"\nperiod = 2.0\nsegments = 3\n";
    optimize(dir.path(), body);
    let first = fs::read(dir.path().join("opt.json")).unwrap();
    let first_log = fs::read(dir.path().join("opt.evaluations.csv")).unwrap();
    optimize(dir.path(), body);
    assert_eq!(first, fs::read(dir.path().join("opt.json")).unwrap());
    assert_eq!(first_log, fs::read(dir.path().join("opt.evaluations.csv")).unwrap());
}
