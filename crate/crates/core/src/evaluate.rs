//! Indicators computed from run artifacts: SLA violation rate, success rate,
//! CPU and memory totals, latency percentiles, plus comparison tables and
//! plot-ready series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaler::{read_actions_csv, ActionStatus};
use crate::sim::{Outcome, RequestRecord};
use crate::telemetry::{
    format_bound, labels, MetricStore, CODE_LABEL, CONTAINER_CPU_USAGE_SECONDS_TOTAL, CONTAINER_MEMORY_USAGE_BYTES,
    DESTINATION_LABEL, ISTIO_REQUESTS_TOTAL, ISTIO_REQUEST_DURATION_BUCKET, KUBE_POD_INFO, LE_LABEL, LOCUST_USERS,
    SERVICE_LABEL,
};
use crate::sim::BYTES_PER_MB;
use crate::time::SimTime;

pub const REQUESTS_CSV_HEADER: [&str; 5] = ["request_id", "arrival_s", "completion_s", "latency_ms", "outcome"];
/// Rate window used for the plot series.
pub const PLOT_WINDOW_S: f64 = 30.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTotals {
    pub injected: u64,
    pub success: u64,
    pub timeout: u64,
    pub dropped: u64,
}

impl RequestTotals {
    pub fn from_records(records: &[RequestRecord]) -> Self {
        let mut t = RequestTotals {
            injected: records.len() as u64,
            ..Default::default()
        };
        for r in records {
            match r.outcome {
                Outcome::Success => t.success += 1,
                Outcome::Timeout => t.timeout += 1,
                Outcome::Dropped => t.dropped += 1,
            }
        }
        t
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceTotals {
    pub cpu_total_core_seconds: f64,
    pub memory_total_mb_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub label: String,
    pub scaler_id: String,
    pub sla_ms: f64,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub svr: f64,
    pub sr: f64,
    pub cpu_total_core_seconds: f64,
    pub memory_total_mb_seconds: f64,
    pub requests: RequestTotals,
    /// Latency of successful requests, nearest rank.
    pub latency_ms: LatencySummary,
    pub scaling_actions: u64,
    pub failed_ticks: u64,
}

fn undefined(what: &str) -> Error {
    Error::Evaluation(format!("{what} is undefined for an empty request set"))
}

/// Share of requests that timed out, were dropped, or took longer than
/// `sla_ms`.
pub fn compute_svr(records: &[RequestRecord], sla_ms: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(undefined("SLA violation rate"));
    }
    let violations = records
        .iter()
        .filter(|r| r.outcome != Outcome::Success || r.latency_ms() > sla_ms)
        .count();
    Ok(violations as f64 / records.len() as f64)
}

pub fn compute_sr(records: &[RequestRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(undefined("success rate"));
    }
    let ok = records.iter().filter(|r| r.outcome == Outcome::Success).count();
    Ok(ok as f64 / records.len() as f64)
}

/// Nearest-rank percentile of already sorted values.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

pub fn latency_summary(records: &[RequestRecord]) -> LatencySummary {
    let mut lat: Vec<f64> = records
        .iter()
        .filter(|r| r.outcome == Outcome::Success)
        .map(|r| r.latency_ms())
        .collect();
    lat.sort_by(f64::total_cmp);
    LatencySummary {
        p50: nearest_rank(&lat, 50.0),
        p90: nearest_rank(&lat, 90.0),
        p95: nearest_rank(&lat, 95.0),
        p99: nearest_rank(&lat, 99.0),
    }
}

/// CPU as the increase of the summed container CPU counters between the
/// first and last scrape in `[from_s, to_s]`; memory as the left Riemann sum
/// of summed container memory (MB) over the same scrapes.
pub fn compute_resource_totals(store: &MetricStore, from_s: f64, to_s: f64) -> Result<ResourceTotals> {
    let from = SimTime::from_secs(from_s);
    let to = SimTime::from_secs(to_s);
    let times: Vec<SimTime> = store
        .scrape_times()
        .iter()
        .copied()
        .filter(|&t| t >= from && t <= to)
        .collect();
    if times.len() < 2 {
        return Err(Error::Evaluation(format!(
            "resource totals need at least 2 scrapes in [{from_s}, {to_s}], found {}",
            times.len()
        )));
    }
    let mut prev: Option<BTreeMap<String, f64>> = None;
    let mut cpu = 0.0;
    let mut mem_mb_s = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let cur: BTreeMap<String, f64> = store
            .values_at(CONTAINER_CPU_USAGE_SECONDS_TOTAL, t)
            .into_iter()
            .map(|(l, v)| (l.get(SERVICE_LABEL).cloned().unwrap_or_default(), v))
            .collect();
        if let Some(p) = &prev {
            for (svc, v) in &cur {
                let before = p.get(svc).copied().unwrap_or(0.0);
                if *v < before {
                    return Err(Error::Evaluation(format!(
                        "counter reset: {CONTAINER_CPU_USAGE_SECONDS_TOTAL}{{service={svc}}} fell from {before} to {v} at {}s",
                        t.as_secs()
                    )));
                }
                cpu += v - before;
            }
        }
        prev = Some(cur);
        if let Some(&next) = times.get(i + 1) {
            let bytes: f64 = store.values_at(CONTAINER_MEMORY_USAGE_BYTES, t).values().sum();
            mem_mb_s += bytes / BYTES_PER_MB * (next - t).as_secs();
        }
    }
    Ok(ResourceTotals {
        cpu_total_core_seconds: cpu,
        memory_total_mb_seconds: mem_mb_s,
    })
}

/// SLA violation rate rebuilt from the entry service's duration histogram
/// at scrape `t_s`: 200-coded spans above the SLA bucket plus every 408 and
/// 503. `sla_ms` must be one of the histogram bounds.
pub fn svr_from_histogram(store: &MetricStore, entry: &str, sla_ms: f64, t_s: f64) -> Result<f64> {
    let t = SimTime::from_secs(t_s);
    let le = format_bound(sla_ms);
    let mut within = None;
    for (l, v) in store.values_at(ISTIO_REQUEST_DURATION_BUCKET, t) {
        if l.get(DESTINATION_LABEL).map(String::as_str) == Some(entry)
            && l.get(CODE_LABEL).map(String::as_str) == Some("200")
            && l.get(LE_LABEL) == Some(&le)
        {
            within = Some(v);
        }
    }
    let within = within.ok_or_else(|| Error::Evaluation(format!("no histogram bucket le={le} for {entry}")))?;
    let totals = store.values_at(ISTIO_REQUESTS_TOTAL, t);
    let mut all = 0.0;
    for (l, v) in totals {
        if l.get(DESTINATION_LABEL).map(String::as_str) == Some(entry) {
            all += v;
        }
    }
    if all == 0.0 {
        return Err(undefined("SLA violation rate"));
    }
    Ok((all - within) / all)
}

pub fn write_requests_csv(records: &[RequestRecord], path: &Path) -> Result<usize> {
    let mut rows: Vec<&RequestRecord> = records.iter().collect();
    rows.sort_by_key(|r| r.id);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| Error::Evaluation(format!("{}: {e}", path.display()));
    w.write_record(REQUESTS_CSV_HEADER).map_err(io)?;
    for r in &rows {
        w.write_record([
            r.id.to_string(),
            r.arrival_time_s().to_string(),
            r.completion_time_s().to_string(),
            r.latency_ms().to_string(),
            r.outcome.as_str().to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

pub fn read_requests_csv(path: &Path) -> Result<Vec<RequestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let bad = |m: String| Error::Trace {
            path: path.to_path_buf(),
            row: i + 1,
            message: m,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != REQUESTS_CSV_HEADER.len() {
            return Err(bad(format!("expected {} columns", REQUESTS_CSV_HEADER.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        out.push(RequestRecord {
            id: rec[0].parse().map_err(|_| bad("bad request id".into()))?,
            arrival: SimTime::from_secs(num(&rec[1])?),
            completion: SimTime::from_secs(num(&rec[2])?),
            outcome: Outcome::parse(&rec[4]).ok_or_else(|| bad(format!("bad outcome {:?}", &rec[4])))?,
        });
    }
    Ok(out)
}

/// What a report needs beyond the three artifact files.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportContext {
    pub label: String,
    pub scaler_id: String,
    pub sla_ms: f64,
    pub window_start_s: f64,
    pub window_end_s: f64,
}

/// Reads `requests.csv`, `metrics.csv` and `actions.csv` from `dir` and
/// computes the report. Missing files are reported by name.
pub fn build_report(dir: &Path, ctx: &ReportContext) -> Result<EvaluationReport> {
    let records = read_requests_csv(&dir.join("requests.csv"))?;
    let store = MetricStore::from_csv(dir.join("metrics.csv"))?;
    let actions = read_actions_csv(&dir.join("actions.csv"))?;
    let resources = compute_resource_totals(&store, ctx.window_start_s, ctx.window_end_s)?;
    Ok(EvaluationReport {
        label: ctx.label.clone(),
        scaler_id: ctx.scaler_id.clone(),
        sla_ms: ctx.sla_ms,
        window_start_s: ctx.window_start_s,
        window_end_s: ctx.window_end_s,
        svr: compute_svr(&records, ctx.sla_ms)?,
        sr: compute_sr(&records)?,
        cpu_total_core_seconds: resources.cpu_total_core_seconds,
        memory_total_mb_seconds: resources.memory_total_mb_seconds,
        requests: RequestTotals::from_records(&records),
        latency_ms: latency_summary(&records),
        scaling_actions: actions.iter().filter(|a| a.status == ActionStatus::Ok).count() as u64,
        failed_ticks: actions.iter().filter(|a| a.status == ActionStatus::Failed).count() as u64,
    })
}

pub fn write_report(report: &EvaluationReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Evaluation(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvaluationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// One row of a comparison: a finished report or the reason a run failed.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub label: String,
    pub scaler_id: String,
    pub outcome: std::result::Result<EvaluationReport, String>,
}

const COMPARISON_HEADER: [&str; 11] = [
    "label",
    "scaler_id",
    "status",
    "svr",
    "sr",
    "cpu_total_core_seconds",
    "memory_total_mb_seconds",
    "injected",
    "success",
    "p95_ms",
    "scaling_actions",
];

fn comparison_cells(row: &ComparisonRow) -> Vec<String> {
    let mut cells = vec![row.label.clone(), row.scaler_id.clone()];
    match &row.outcome {
        Ok(r) => {
            cells.push("ok".into());
            cells.push(format!("{:.4}", r.svr));
            cells.push(format!("{:.4}", r.sr));
            cells.push(format!("{:.1}", r.cpu_total_core_seconds));
            cells.push(format!("{:.1}", r.memory_total_mb_seconds));
            cells.push(r.requests.injected.to_string());
            cells.push(r.requests.success.to_string());
            cells.push(r.latency_ms.p95.map(|v| format!("{v:.1}")).unwrap_or_default());
            cells.push(r.scaling_actions.to_string());
        }
        Err(_) => {
            cells.push("failed".into());
            cells.extend(std::iter::repeat_n(String::new(), COMPARISON_HEADER.len() - 3));
        }
    }
    cells
}

/// Writes `comparison.csv` and `comparison.md`, rows sorted by label.
pub fn write_comparison(rows: &[ComparisonRow], dir: &Path) -> Result<()> {
    let mut sorted: Vec<&ComparisonRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.label.cmp(&b.label));

    let csv_path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Evaluation(e.to_string()))?;
    w.write_record(COMPARISON_HEADER).map_err(|e| Error::Evaluation(e.to_string()))?;
    for row in &sorted {
        w.write_record(comparison_cells(row))
            .map_err(|e| Error::Evaluation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut md = String::new();
    let _ = writeln!(md, "| {} |", COMPARISON_HEADER.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(COMPARISON_HEADER.len()));
    for row in &sorted {
        let _ = writeln!(md, "| {} |", comparison_cells(row).join(" | "));
    }
    let md_path = dir.join("comparison.md");
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))
}

fn write_tidy(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Evaluation(e.to_string()))?;
    w.write_record(header).map_err(|e| Error::Evaluation(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Evaluation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `plots/users.csv`, `plots/replicas.csv`, `plots/p95.csv` and
/// `plots/cpu.csv` as tidy per-scrape series.
pub fn write_plot_series(store: &MetricStore, services: &[String], dir: &Path) -> Result<()> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let (mut users, mut replicas, mut p95, mut cpu) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &t in store.scrape_times() {
        let ts = t.as_secs();
        let tcell = ts.to_string();
        if let Some(u) = store.latest(LOCUST_USERS, &Default::default(), ts)? {
            users.push(vec![tcell.clone(), u.to_string()]);
        }
        for svc in services {
            let m = labels([(SERVICE_LABEL, svc.as_str())]);
            if let Some(r) = store.latest(KUBE_POD_INFO, &m, ts)? {
                replicas.push(vec![tcell.clone(), svc.clone(), r.to_string()]);
            }
            if let Some(q) = store.query_latency_quantile(svc, 0.95, PLOT_WINDOW_S, ts)? {
                p95.push(vec![tcell.clone(), svc.clone(), q.to_string()]);
            }
            if let Some(c) = store.query_rate(CONTAINER_CPU_USAGE_SECONDS_TOTAL, &m, PLOT_WINDOW_S, ts)? {
                cpu.push(vec![tcell.clone(), svc.clone(), c.to_string()]);
            }
        }
    }
    write_tidy(&plots.join("users.csv"), &["t_s", "users"], users)?;
    write_tidy(&plots.join("replicas.csv"), &["t_s", "service", "replicas"], replicas)?;
    write_tidy(&plots.join("p95.csv"), &["t_s", "service", "p95_ms"], p95)?;
    write_tidy(&plots.join("cpu.csv"), &["t_s", "service", "cores"], cpu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::build_simulation;
    use crate::topology::ServiceTopology;

    fn rec(id: u64, latency_ms: f64, outcome: Outcome) -> RequestRecord {
        RequestRecord {
            id,
            arrival: SimTime::ZERO,
            completion: SimTime::from_secs(latency_ms / 1000.0),
            outcome,
        }
    }

    #[test]
    fn svr_by_hand() {
        let r: Vec<_> = [100.0, 600.0, 400.0, 700.0]
            .iter()
            .enumerate()
            .map(|(i, &l)| rec(i as u64, l, Outcome::Success))
            .collect();
        assert_eq!(compute_svr(&r, 500.0).unwrap(), 0.5);
        assert_eq!(compute_svr(&r[..1], 500.0).unwrap(), 0.0);
        let dropped = vec![rec(0, 0.0, Outcome::Dropped); 3];
        assert_eq!(compute_svr(&dropped, 500.0).unwrap(), 1.0);
        assert!(compute_svr(&[], 500.0).is_err());
    }

    #[test]
    fn sr_by_hand() {
        let r = [
            rec(0, 1.0, Outcome::Success),
            rec(1, 1.0, Outcome::Success),
            rec(2, 1.0, Outcome::Timeout),
            rec(3, 1.0, Outcome::Dropped),
        ];
        assert_eq!(compute_sr(&r).unwrap(), 0.5);
        assert_eq!(compute_sr(&r[..2]).unwrap(), 1.0);
        assert_eq!(compute_sr(&r[2..3]).unwrap(), 0.0);
        assert!(compute_sr(&[]).is_err());
    }

    #[test]
    fn nearest_rank_values() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 50.0), Some(50.0));
        assert_eq!(nearest_rank(&v, 95.0), Some(95.0));
        assert_eq!(nearest_rank(&[3.0], 99.0), Some(3.0));
        assert_eq!(nearest_rank(&[], 50.0), None);
    }

    #[test]
    fn idle_resource_totals() {
        let mut topo = ServiceTopology::single("s", 3, 1.0);
        topo.services[0].base_memory_mb = 100.0;
        let mut sim = build_simulation(&topo, 1).unwrap();
        let mut store = MetricStore::new(5.0);
        for i in 0..=12 {
            sim.advance_to_secs(i as f64 * 5.0);
            store.scrape(&sim, i as f64 * 5.0).unwrap();
        }
        let t = compute_resource_totals(&store, 0.0, 60.0).unwrap();
        assert_eq!(t.cpu_total_core_seconds, 0.0);
        assert_eq!(t.memory_total_mb_seconds, 300.0 * 60.0);
        assert!(compute_resource_totals(&store, 0.0, 0.0).is_err());
    }

    #[test]
    fn requests_csv_round_trip() {
        let r = vec![rec(2, 12.5, Outcome::Timeout), rec(1, 1.0 / 3.0, Outcome::Success)];
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("requests.csv");
        write_requests_csv(&r, &p).unwrap();
        let back = read_requests_csv(&p).unwrap();
        assert_eq!(back, vec![r[1], r[0]]);
    }

    #[test]
    fn missing_artifact_named() {
        let d = tempfile::tempdir().unwrap();
        let ctx = ReportContext {
            label: "none".into(),
            scaler_id: "none".into(),
            sla_ms: 500.0,
            window_start_s: 0.0,
            window_end_s: 60.0,
        };
        match build_report(d.path(), &ctx).unwrap_err() {
            Error::MissingArtifact(p) => assert!(p.ends_with("requests.csv")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn comparison_sorted_with_failed_row() {
        let report = EvaluationReport {
            label: "b".into(),
            scaler_id: "khpa".into(),
            sla_ms: 500.0,
            window_start_s: 0.0,
            window_end_s: 1.0,
            svr: 0.25,
            sr: 0.75,
            cpu_total_core_seconds: 1.0,
            memory_total_mb_seconds: 2.0,
            requests: RequestTotals::default(),
            latency_ms: LatencySummary::default(),
            scaling_actions: 0,
            failed_ticks: 0,
        };
        let rows = vec![
            ComparisonRow {
                label: "b".into(),
                scaler_id: "khpa".into(),
                outcome: Ok(report),
            },
            ComparisonRow {
                label: "a".into(),
                scaler_id: "pid".into(),
                outcome: Err("boom".into()),
            },
        ];
        let d = tempfile::tempdir().unwrap();
        write_comparison(&rows, d.path()).unwrap();
        let csv = std::fs::read_to_string(d.path().join("comparison.csv")).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("a,pid,failed"));
        assert!(lines[2].starts_with("b,khpa,ok,0.2500,0.7500"));
        let md = std::fs::read_to_string(d.path().join("comparison.md")).unwrap();
        assert_eq!(md.lines().count(), 4);
    }
}
