use std::fs;
use std::path::{Path, PathBuf};

use scalebench::evaluate::{build_report, read_requests_csv, ReportContext};
use scalebench::experiment::{run_comparison, run_experiment, validate_config, validate_config_with, Overrides};
use scalebench::scaler::read_actions_csv;

const TOPOLOGY: &str = r#"{
  "name": "shop",
  "entry_service": "web",
  "services": [
    {"name": "web", "initial_replicas": 1, "service_rate_mu": 40},
    {"name": "cart", "initial_replicas": 1, "service_rate_mu": 60, "memory_per_utilization_mb": 30},
    {"name": "db", "initial_replicas": 1, "service_rate_mu": 120}
  ],
  "edges": [
    {"caller": "web", "callee": "cart", "calls_per_request": 0.7},
    {"caller": "cart", "callee": "db", "calls_per_request": 1.5}
  ]
}"#;

fn fixture(dir: &Path, scalers: &str) -> PathBuf {
    fs::write(dir.join("topology.json"), TOPOLOGY).unwrap();
    fs::write(dir.join("manifest.json"), r#"{"topology": "topology.json"}"#).unwrap();
    fs::write(dir.join("trace.csv"), "offset_s,user_count\n0,10\n60,60\n120,30\n").unwrap();
    let p = dir.join("config.json");
    fs::write(
        &p,
        format!(r#"{{"benchmark": "manifest.json", "trace": "trace.csv", "seed": 42, {scalers}}}"#),
    )
    .unwrap();
    p
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn same_seed_same_bytes() {
    let d = tempfile::tempdir().unwrap();
    let p = fixture(d.path(), r#""scaler": {"id": "khpa", "params": {"cpu_threshold": 0.3}}"#);
    let a = validate_config_with(&p, &Overrides { seed: None, output_dir: Some(d.path().join("a")) }).unwrap();
    let b = validate_config_with(&p, &Overrides { seed: None, output_dir: Some(d.path().join("b")) }).unwrap();
    let ra = run_experiment(&a).unwrap();
    let rb = run_experiment(&b).unwrap();
    assert!(ra.report.scaling_actions > 0);
    for f in ["requests.csv", "metrics.csv", "actions.csv", "report.json"] {
        assert_eq!(bytes(&ra.output_dir, f), bytes(&rb.output_dir, f), "{f}");
    }
}

#[test]
fn different_seed_differs() {
    let d = tempfile::tempdir().unwrap();
    let p = fixture(d.path(), r#""scaler": {"id": "none"}"#);
    let a = validate_config_with(&p, &Overrides { seed: Some(1), output_dir: Some(d.path().join("a")) }).unwrap();
    let b = validate_config_with(&p, &Overrides { seed: Some(2), output_dir: Some(d.path().join("b")) }).unwrap();
    let ra = run_experiment(&a).unwrap();
    let rb = run_experiment(&b).unwrap();
    assert_ne!(bytes(&ra.output_dir, "requests.csv"), bytes(&rb.output_dir, "requests.csv"));
}

#[test]
fn rerun_into_same_dir_replaces_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = fixture(d.path(), r#""scaler": {"id": "none"}"#);
    let exp = validate_config(&p).unwrap();
    let first = run_experiment(&exp).unwrap();
    let before = bytes(&first.output_dir, "metrics.csv");
    let second = run_experiment(&exp).unwrap();
    assert_eq!(before, bytes(&second.output_dir, "metrics.csv"));
}

#[test]
fn report_is_pure_function_of_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let p = fixture(d.path(), r#""scaler": {"id": "predictive"}"#);
    let exp = validate_config(&p).unwrap();
    let r = run_experiment(&exp).unwrap();
    let ctx = ReportContext {
        label: r.report.label.clone(),
        scaler_id: r.report.scaler_id.clone(),
        sla_ms: r.report.sla_ms,
        window_start_s: r.report.window_start_s,
        window_end_s: r.report.window_end_s,
    };
    assert_eq!(build_report(&r.output_dir, &ctx).unwrap(), r.report);
    let recs = read_requests_csv(&r.output_dir.join("requests.csv")).unwrap();
    assert_eq!(recs.len() as u64, r.report.requests.injected);
}

#[test]
fn zero_gain_pid_matches_none() {
    let d = tempfile::tempdir().unwrap();
    let p = fixture(
        d.path(),
        r#""scalers": [{"id": "none"}, {"id": "pid", "label": "pid-off", "params": {"kp": 0, "ki": 0, "kd": 0}}]"#,
    );
    let exp = validate_config(&p).unwrap();
    let rows = run_comparison(&exp).unwrap();
    let out = &exp.config.output_dir;
    let none = read_actions_csv(&out.join("01-none/actions.csv")).unwrap();
    let pid = read_actions_csv(&out.join("02-pid-off/actions.csv")).unwrap();
    assert!(none.is_empty() && pid.is_empty());
    assert_eq!(
        bytes(&out.join("01-none"), "requests.csv"),
        bytes(&out.join("02-pid-off"), "requests.csv")
    );
    assert_eq!(rows[0].outcome.as_ref().unwrap().svr, rows[1].outcome.as_ref().unwrap().svr);
}

#[test]
fn comparison_runs_share_initial_scrape() {
    let d = tempfile::tempdir().unwrap();
    let p = fixture(
        d.path(),
        r#""scalers": [{"id": "none"}, {"id": "khpa"}, {"id": "pid"}, {"id": "predictive"}]"#,
    );
    let exp = validate_config(&p).unwrap();
    let rows = run_comparison(&exp).unwrap();
    assert_eq!(rows.len(), 4);
    let first_scrape = |dir: &str| -> Vec<String> {
        fs::read_to_string(exp.config.output_dir.join(dir).join("metrics.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .take_while(|l| l.starts_with("0,"))
            .map(str::to_string)
            .collect()
    };
    let base = first_scrape("01-none");
    assert!(!base.is_empty());
    for dir in ["02-khpa", "03-pid", "04-predictive"] {
        assert_eq!(first_scrape(dir), base, "{dir}");
    }
    let md = fs::read_to_string(exp.config.output_dir.join("comparison.md")).unwrap();
    assert_eq!(md.lines().count(), 6);
}

#[test]
fn no_ticks_after_cancel_and_none_before_register() {
    let d = tempfile::tempdir().unwrap();
    let p = fixture(d.path(), r#""scaler": {"id": "khpa", "control_interval_s": 20}"#);
    let exp = validate_config(&p).unwrap();
    let r = run_experiment(&exp).unwrap();
    let actions = read_actions_csv(&r.output_dir.join("actions.csv")).unwrap();
    assert!(actions.iter().all(|a| a.tick_s > 0.0 && a.tick_s < exp.config.duration_s));
    assert!(actions.iter().all(|a| a.tick_s % 20.0 == 0.0));
}
