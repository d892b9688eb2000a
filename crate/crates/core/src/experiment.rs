//! Experiment configuration and the one-command pipeline: reset the
//! benchmark, register the scaler, inject the trace with the control loop
//! running, cancel, drain and export metrics, then evaluate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::{load_benchmark, reset_benchmark, Benchmark};
use crate::error::{Error, Result};
use crate::evaluate::{
    build_report, write_comparison, write_plot_series, write_report, write_requests_csv, ComparisonRow,
    EvaluationReport, ReportContext,
};
use crate::scaler::{write_actions_csv, LifecycleEvent, Scaler, ScalerHandle, DEFAULT_CONTROL_INTERVAL_S};
use crate::scalers::build_scaler;
use crate::sim::SimConfig;
use crate::telemetry::{verify_integrity, MetricStore, DEFAULT_SCRAPE_INTERVAL_S};
use crate::workload::{load_trace, run_drain, run_injection, InjectionSummary, LoadTrace, UserModel, DEFAULT_DRAIN_S};

pub const DEFAULT_STARTUP_DELAY_S: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalerConfig {
    pub id: String,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub control_interval_s: Option<f64>,
    #[serde(default)]
    pub label: Option<String>,
}

/// The config file as written. Optional fields are filled in by
/// [`validate_config`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub benchmark: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub user_model: Option<UserModel>,
    pub scaler: Option<ScalerConfig>,
    pub scalers: Option<Vec<ScalerConfig>>,
    pub seed: Option<u64>,
    pub scrape_interval_s: Option<f64>,
    pub startup_delay_s: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub sla_ms: Option<f64>,
    pub duration_s: Option<f64>,
    pub drain_s: Option<f64>,
}

/// One fully resolved scaler entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedScaler {
    pub id: String,
    pub label: String,
    pub params: serde_json::Value,
    pub control_interval_s: f64,
}

/// Normalized configuration: every default applied, paths resolved against
/// the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub benchmark: PathBuf,
    pub trace: PathBuf,
    pub user_model: UserModel,
    pub scalers: Vec<ResolvedScaler>,
    pub seed: u64,
    pub scrape_interval_s: f64,
    pub startup_delay_s: f64,
    pub output_dir: PathBuf,
    pub sla_ms: f64,
    pub duration_s: f64,
    pub drain_s: f64,
}

impl ExperimentConfig {
    /// SHA-256 of the normalized config as JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A validated config with its loaded inputs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub defaults_applied: Vec<String>,
    pub benchmark: Benchmark,
    pub trace: LoadTrace,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

pub fn validate_config(path: impl AsRef<Path>) -> Result<Experiment> {
    validate_config_with(path, &Overrides::default())
}

/// Parses and validates a config file, collecting every problem rather than
/// stopping at the first.
pub fn validate_config_with(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Experiment> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(raw, base, overrides)
}

pub fn resolve(raw: RawConfig, base: &Path, overrides: &Overrides) -> Result<Experiment> {
    let mut errors = Vec::new();
    let mut defaults = Vec::new();

    let benchmark_path = raw.benchmark.map(|p| base.join(p));
    let benchmark = match &benchmark_path {
        None => {
            errors.push("benchmark: required".to_string());
            None
        }
        Some(p) => match load_benchmark(p) {
            Ok(b) => Some(b),
            Err(e) => {
                errors.push(format!("benchmark: {e}"));
                None
            }
        },
    };
    let trace_path = raw.trace.map(|p| base.join(p));
    let mut trace = match &trace_path {
        None => {
            errors.push("trace: required".to_string());
            None
        }
        Some(p) => match load_trace(p) {
            Ok(t) => Some(t),
            Err(e) => {
                errors.push(format!("trace: {e}"));
                None
            }
        },
    };

    let user_model = raw.user_model.unwrap_or_else(|| {
        defaults.push("user_model = closed_loop, think_time_s = 1".to_string());
        UserModel::default()
    });
    if let Err(e) = user_model.validate() {
        errors.push(format!("user_model: {e}"));
    }

    let seed = overrides.seed.or(raw.seed);
    if seed.is_none() {
        errors.push("seed: required".to_string());
    }

    let mut positive = |name: &str, v: Option<f64>, default: f64, allow_zero: bool, defaults: &mut Vec<String>| {
        let v = v.unwrap_or_else(|| {
            defaults.push(format!("{name} = {default}"));
            default
        });
        let ok = v.is_finite() && if allow_zero { v >= 0.0 } else { v > 0.0 };
        if !ok {
            errors.push(format!("{name}: must be {}, got {v}", if allow_zero { ">= 0" } else { "> 0" }));
        }
        v
    };
    let scrape_interval_s = positive(
        "scrape_interval_s",
        raw.scrape_interval_s,
        DEFAULT_SCRAPE_INTERVAL_S,
        false,
        &mut defaults,
    );
    let startup_delay_s = positive("startup_delay_s", raw.startup_delay_s, DEFAULT_STARTUP_DELAY_S, true, &mut defaults);
    let drain_s = positive("drain_s", raw.drain_s, DEFAULT_DRAIN_S, true, &mut defaults);
    let topo_sla = benchmark.as_ref().map_or(500.0, |b| b.topology.sla_ms);
    let sla_ms = positive("sla_ms", raw.sla_ms, topo_sla, false, &mut defaults);
    if let Some(b) = &benchmark {
        if drain_s * 1000.0 < b.topology.timeout_ms {
            errors.push(format!(
                "drain_s: {drain_s} is shorter than the request timeout ({} ms)",
                b.topology.timeout_ms
            ));
        }
    }

    if let Some(d) = raw.duration_s {
        if let Some(t) = trace.take() {
            match t.with_duration(d) {
                Ok(t) => trace = Some(t),
                Err(e) => errors.push(format!("duration_s: {e}")),
            }
        }
    } else if let Some(t) = &trace {
        defaults.push(format!("duration_s = {} (from trace)", t.duration_s()));
    }
    let duration_s = trace.as_ref().map_or(0.0, |t| t.duration_s());
    if let Some(t) = &trace {
        let ticks = (t.duration_s() / scrape_interval_s).round();
        if scrape_interval_s > 0.0 && (ticks * scrape_interval_s - t.duration_s()).abs() > 1e-9 {
            errors.push(format!(
                "duration_s: {} is not a multiple of scrape_interval_s {scrape_interval_s}",
                t.duration_s()
            ));
        }
    }

    let entries: Vec<ScalerConfig> = match (raw.scaler, raw.scalers) {
        (Some(_), Some(_)) => {
            errors.push("give either scaler or scalers, not both".to_string());
            Vec::new()
        }
        (Some(s), None) => vec![s],
        (None, Some(list)) => list,
        (None, None) => {
            defaults.push("scaler = none".to_string());
            vec![ScalerConfig {
                id: "none".into(),
                params: serde_json::Value::Null,
                control_interval_s: None,
                label: None,
            }]
        }
    };
    if entries.is_empty() && errors.is_empty() {
        errors.push("scalers: list is empty".to_string());
    }
    let mut scalers = Vec::new();
    for (i, s) in entries.into_iter().enumerate() {
        if let Err(e) = build_scaler(&s.id, &s.params) {
            match e {
                Error::Config(list) => errors.extend(list.into_iter().map(|m| format!("scalers[{i}]: {m}"))),
                other => errors.push(format!("scalers[{i}]: {other}")),
            }
        }
        let control_interval_s = s.control_interval_s.unwrap_or_else(|| {
            defaults.push(format!("scalers[{i}].control_interval_s = {DEFAULT_CONTROL_INTERVAL_S}"));
            DEFAULT_CONTROL_INTERVAL_S
        });
        if !(control_interval_s > 0.0 && control_interval_s.is_finite()) {
            errors.push(format!("scalers[{i}].control_interval_s: must be > 0"));
        }
        let label = s.label.unwrap_or_else(|| s.id.clone());
        if label.is_empty() || label.contains(['/', '\\']) {
            errors.push(format!("scalers[{i}].label: {label:?} is not a valid directory name"));
        }
        scalers.push(ResolvedScaler {
            id: s.id,
            label,
            params: s.params,
            control_interval_s,
        });
    }

    let output_dir = overrides
        .output_dir
        .clone()
        .or_else(|| raw.output_dir.map(|p| base.join(p)))
        .unwrap_or_else(|| {
            defaults.push("output_dir = out".to_string());
            base.join("out")
        });

    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let (Some(mut benchmark), Some(trace), Some(seed)) = (benchmark, trace, seed) else {
        unreachable!("missing inputs are reported as errors");
    };
    benchmark.topology.sla_ms = sla_ms;
    Ok(Experiment {
        config: ExperimentConfig {
            benchmark: benchmark_path.unwrap_or_default(),
            trace: trace_path.unwrap_or_default(),
            user_model,
            scalers,
            seed,
            scrape_interval_s,
            startup_delay_s,
            output_dir,
            sla_ms,
            duration_s,
            drain_s,
        },
        defaults_applied: defaults,
        benchmark,
        trace,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: &'static str,
    pub sim_time_s: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub label: String,
    pub scaler_id: String,
    pub benchmark: String,
    pub scalebench_version: &'static str,
    pub rng: &'static str,
    pub horizon_s: f64,
    pub drain_s: f64,
    pub sla_ms: f64,
    pub stages: Vec<StageRecord>,
    pub integrity_problems: Vec<String>,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn write_meta(meta: &RunMeta, dir: &Path) -> Result<()> {
    let path = dir.join("run-meta.json");
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| Error::Evaluation(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Everything a finished run hands back besides the files it wrote.
#[derive(Debug)]
pub struct RunResult {
    pub report: EvaluationReport,
    pub output_dir: PathBuf,
    pub injection: InjectionSummary,
    pub lifecycle: Vec<LifecycleEvent>,
    pub integrity_problems: Vec<String>,
    pub store: MetricStore,
    pub wall_s: f64,
}

/// Runs the experiment's single scaler into `config.output_dir`.
pub fn run_experiment(exp: &Experiment) -> Result<RunResult> {
    if exp.config.scalers.len() != 1 {
        return Err(Error::Config(vec![format!(
            "run takes exactly one scaler, got {}; use compare for several",
            exp.config.scalers.len()
        )]));
    }
    let s = &exp.config.scalers[0];
    let scaler = build_scaler(&s.id, &s.params)?;
    run_with_scaler(exp, s, scaler, &exp.config.output_dir)
}

/// Runs one scaler through every stage, writing artifacts to `out`.
/// `run-meta.json` is written before the first stage and marked completed
/// only after the last.
pub fn run_with_scaler(exp: &Experiment, entry: &ResolvedScaler, scaler: Box<dyn Scaler>, out: &Path) -> Result<RunResult> {
    let started = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("reset"))?;
    let cfg = &exp.config;
    let mut meta = RunMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        label: entry.label.clone(),
        scaler_id: entry.id.clone(),
        benchmark: exp.benchmark.topology.name.clone(),
        scalebench_version: env!("CARGO_PKG_VERSION"),
        rng: crate::rng::GENERATOR_NAME,
        horizon_s: cfg.duration_s,
        drain_s: cfg.drain_s,
        sla_ms: cfg.sla_ms,
        stages: Vec::new(),
        integrity_problems: Vec::new(),
        completed: false,
        error: None,
    };
    let result = run_stages(exp, entry, scaler, out, &mut meta, started);
    if let Err(e) = &result {
        meta.error = Some(e.to_string());
    }
    meta.completed = result.is_ok();
    write_meta(&meta, out)?;
    result
}

fn run_stages(
    exp: &Experiment,
    entry: &ResolvedScaler,
    scaler: Box<dyn Scaler>,
    out: &Path,
    meta: &mut RunMeta,
    started: Instant,
) -> Result<RunResult> {
    let cfg = &exp.config;
    let mut store = MetricStore::new(cfg.scrape_interval_s);
    let sim_config = SimConfig {
        startup_delay_s: cfg.startup_delay_s,
        ..SimConfig::default()
    };
    let mark = |meta: &mut RunMeta, stage: &'static str, t: f64| {
        meta.stages.push(StageRecord {
            stage,
            sim_time_s: t,
            wall_ms: started.elapsed().as_millis(),
        });
    };

    let mut sim = reset_benchmark(&exp.benchmark.topology, cfg.seed, sim_config, &mut store, Some(out))
        .map_err(|e| e.in_stage("reset"))?;
    write_meta(meta, out).map_err(|e| e.in_stage("reset"))?;
    store.scrape(&sim, 0.0).map_err(|e| Error::from(e).in_stage("reset"))?;
    mark(meta, "reset", 0.0);

    let mut handle = ScalerHandle::new(entry.id.clone(), scaler, entry.control_interval_s);
    handle.register(&store, &mut sim).map_err(|e| e.in_stage("register"))?;
    mark(meta, "register", 0.0);

    let mut records = Vec::new();
    let injection = run_injection(&mut sim, &exp.trace, cfg.user_model, &mut store, &mut handle, &mut records)
        .map_err(|e| e.in_stage("inject"))?;
    mark(meta, "cancel", sim.clock().as_secs());

    run_drain(&mut sim, &mut store, cfg.drain_s, &mut records).map_err(|e| e.in_stage("collect"))?;
    let export = || -> Result<()> {
        write_requests_csv(&records, &out.join("requests.csv"))?;
        store.export_csv(out.join("metrics.csv"))?;
        write_actions_csv(handle.actions(), &out.join("actions.csv"))?;
        let services: Vec<String> = exp.benchmark.topology.services.iter().map(|s| s.name.clone()).collect();
        write_plot_series(&store, &services, out)
    };
    export().map_err(|e| e.in_stage("collect"))?;
    let integrity_problems = verify_integrity(&store);
    meta.integrity_problems = integrity_problems.clone();
    mark(meta, "collect", sim.clock().as_secs());

    let ctx = ReportContext {
        label: entry.label.clone(),
        scaler_id: entry.id.clone(),
        sla_ms: cfg.sla_ms,
        window_start_s: 0.0,
        window_end_s: cfg.duration_s,
    };
    let report = build_report(out, &ctx).map_err(|e| e.in_stage("evaluate"))?;
    write_report(&report, &out.join("report.json")).map_err(|e| e.in_stage("evaluate"))?;
    mark(meta, "evaluate", sim.clock().as_secs());

    Ok(RunResult {
        report,
        output_dir: out.to_path_buf(),
        injection,
        lifecycle: handle.lifecycle_events().to_vec(),
        integrity_problems,
        store,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

/// Runs every listed scaler as an isolated experiment under
/// `output_dir/NN-label`, in parallel, and writes the comparison table to
/// `output_dir`. A failing run becomes a failed row.
pub fn run_comparison(exp: &Experiment) -> Result<Vec<ComparisonRow>> {
    let cfg = &exp.config;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let rows: Vec<ComparisonRow> = cfg
        .scalers
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let dir = cfg.output_dir.join(format!("{:02}-{}", i + 1, s.label));
            let outcome = build_scaler(&s.id, &s.params)
                .and_then(|scaler| run_with_scaler(exp, s, scaler, &dir))
                .map(|r| r.report)
                .map_err(|e| {
                    log::error!("run {} failed: {e}", s.label);
                    e.to_string()
                });
            ComparisonRow {
                label: s.label.clone(),
                scaler_id: s.id.clone(),
                outcome,
            }
        })
        .collect();
    write_comparison(&rows, &cfg.output_dir)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn fixture(dir: &Path, config: &str) -> PathBuf {
        fs::write(
            dir.join("topo.json"),
            r#"{"name": "tiny", "entry_service": "web",
                "services": [
                    {"name": "web", "initial_replicas": 1, "service_rate_mu": 50},
                    {"name": "db", "initial_replicas": 1, "service_rate_mu": 80}],
                "edges": [{"caller": "web", "callee": "db", "calls_per_request": 1}]}"#,
        )
        .unwrap();
        fs::write(dir.join("manifest.json"), r#"{"topology": "topo.json"}"#).unwrap();
        fs::write(dir.join("trace.csv"), "offset_s,user_count\n0,5\n30,20\n").unwrap();
        let p = dir.join("config.json");
        fs::write(&p, config).unwrap();
        p
    }

    #[test]
    fn minimal_config_echoes_defaults() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(
            d.path(),
            r#"{"benchmark": "manifest.json", "trace": "trace.csv", "seed": 1}"#,
        );
        let exp = validate_config(&p).unwrap();
        assert_eq!(exp.config.scrape_interval_s, 5.0);
        assert_eq!(exp.config.startup_delay_s, 10.0);
        assert_eq!(exp.config.scalers[0].control_interval_s, 15.0);
        assert_eq!(exp.config.duration_s, 60.0);
        for key in ["scrape_interval_s", "startup_delay_s", "control_interval_s", "scaler = none"] {
            assert!(exp.defaults_applied.iter().any(|d| d.contains(key)), "{key}");
        }
    }

    #[test]
    fn sla_override() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(
            d.path(),
            r#"{"benchmark": "manifest.json", "trace": "trace.csv", "seed": 1, "sla_ms": 300}"#,
        );
        let exp = validate_config(&p).unwrap();
        assert_eq!(exp.config.sla_ms, 300.0);
        assert_eq!(exp.benchmark.topology.sla_ms, 300.0);
    }

    #[test]
    fn all_errors_reported() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(
            d.path(),
            r#"{"benchmark": "manifest.json", "trace": "missing.csv",
                "scaler": {"id": "bogus"}, "scrape_interval_s": -1}"#,
        );
        match validate_config(&p).unwrap_err() {
            Error::Config(errs) => {
                assert_eq!(errs.len(), 4, "{errs:?}");
                assert!(errs.iter().any(|e| e.contains("missing.csv")));
                assert!(errs.iter().any(|e| e.contains("seed")));
                assert!(errs.iter().any(|e| e.contains("bogus") && e.contains("khpa")));
                assert!(errs.iter().any(|e| e.contains("scrape_interval_s")));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn seed_from_override() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(d.path(), r#"{"benchmark": "manifest.json", "trace": "trace.csv"}"#);
        let o = Overrides {
            seed: Some(9),
            output_dir: None,
        };
        assert_eq!(validate_config_with(&p, &o).unwrap().config.seed, 9);
    }

    #[test]
    fn run_writes_all_artifacts() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(
            d.path(),
            r#"{"benchmark": "manifest.json", "trace": "trace.csv", "seed": 3,
                "scaler": {"id": "khpa", "params": {"cpu_threshold": 0.5}}}"#,
        );
        let exp = validate_config(&p).unwrap();
        let r = run_experiment(&exp).unwrap();
        for f in crate::benchmark::RUN_ARTIFACTS {
            assert!(r.output_dir.join(f).exists(), "{f}");
        }
        for f in ["users", "replicas", "p95", "cpu"] {
            assert!(r.output_dir.join("plots").join(format!("{f}.csv")).exists());
        }
        assert!(r.integrity_problems.is_empty(), "{:?}", r.integrity_problems);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(r.output_dir.join("run-meta.json")).unwrap()).unwrap();
        assert_eq!(meta["completed"], true);
        assert_eq!(meta["stages"].as_array().unwrap().len(), 5);
        assert_eq!(r.report.requests.injected, r.injection.requests);
    }

    #[test]
    fn comparison_rows_per_scaler() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(
            d.path(),
            r#"{"benchmark": "manifest.json", "trace": "trace.csv", "seed": 3,
                "scalers": [{"id": "none"}, {"id": "none", "label": "none-again"}, {"id": "pid"}]}"#,
        );
        let exp = validate_config(&p).unwrap();
        let rows = run_comparison(&exp).unwrap();
        assert_eq!(rows.len(), 3);
        let a = rows[0].outcome.as_ref().unwrap();
        let b = rows[1].outcome.as_ref().unwrap();
        assert_eq!((a.svr, a.sr, a.requests), (b.svr, b.sr, b.requests));
        assert!(d.path().join("out/comparison.md").exists());
        assert!(d.path().join("out/02-none-again/report.json").exists());
    }
}
