//! Prometheus-style metric store over a running simulation.
//!
//! Metric names follow what Istio, cAdvisor, kube-state-metrics and the node
//! exporter publish, so downstream tooling that expects those names can read
//! the exported CSV unchanged. Samples are taken at a fixed scrape interval.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::sim::{Outcome, Simulation};
use crate::time::SimTime;

pub const DEFAULT_SCRAPE_INTERVAL_S: f64 = 5.0;

pub const KUBE_POD_INFO: &str = "kube_pod_info";
pub const ISTIO_REQUESTS_TOTAL: &str = "istio_requests_total";
pub const ISTIO_REQUEST_DURATION_BUCKET: &str = "istio_request_duration_milliseconds_bucket";
pub const CONTAINER_CPU_USAGE_SECONDS_TOTAL: &str = "container_cpu_usage_seconds_total";
pub const CONTAINER_MEMORY_USAGE_BYTES: &str = "container_memory_usage_bytes";
pub const NODE_CPU_SECONDS_TOTAL: &str = "node_cpu_seconds_total";
pub const NODE_MEMORY_MEMTOTAL_BYTES: &str = "node_memory_MemTotal_bytes";
pub const NODE_MEMORY_MEMFREE_BYTES: &str = "node_memory_MemFree_bytes";
pub const NODE_MEMORY_BUFFERS_BYTES: &str = "node_memory_Buffers_bytes";
/// Active simulated users, as a load-generator exporter would publish it.
pub const LOCUST_USERS: &str = "locust_users";

pub const SERVICE_LABEL: &str = "service";
pub const DESTINATION_LABEL: &str = "destination_service";
pub const CODE_LABEL: &str = "response_code";
pub const LE_LABEL: &str = "le";
pub const MODE_LABEL: &str = "mode";

pub const CSV_HEADER: [&str; 4] = ["timestamp_s", "name", "labels", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MetricKind {
    Counter,
    Gauge,
}

pub fn known_metric_kind(name: &str) -> Option<MetricKind> {
    match name {
        ISTIO_REQUESTS_TOTAL
        | ISTIO_REQUEST_DURATION_BUCKET
        | CONTAINER_CPU_USAGE_SECONDS_TOTAL
        | NODE_CPU_SECONDS_TOTAL => Some(MetricKind::Counter),
        KUBE_POD_INFO
        | CONTAINER_MEMORY_USAGE_BYTES
        | NODE_MEMORY_MEMTOTAL_BYTES
        | NODE_MEMORY_MEMFREE_BYTES
        | NODE_MEMORY_BUFFERS_BYTES
        | LOCUST_USERS => Some(MetricKind::Gauge),
        _ => None,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("scrape time {t_s}s is not a multiple of the {interval_s}s scrape interval")]
    Unaligned { t_s: f64, interval_s: f64 },
    #[error("scrape time {t_s}s does not advance past the previous scrape")]
    NotIncreasing { t_s: f64 },
    #[error("scrape at {t_s}s but the simulation clock is at {clock_s}s")]
    ClockMismatch { t_s: f64, clock_s: f64 },
    #[error("window {window_s}s is shorter than two scrape intervals ({min_s}s)")]
    WindowTooShort { window_s: f64, min_s: f64 },
    #[error("quantile {0} outside (0, 1)")]
    InvalidQuantile(f64),
}

/// Ordered label set.
pub type Labels = BTreeMap<String, String>;

pub fn labels<const N: usize>(pairs: [(&str, &str); N]) -> Labels {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// `k=v` pairs sorted by key and joined with `;`.
pub fn format_labels(labels: &Labels) -> String {
    let mut out = String::new();
    for (i, (k, v)) in labels.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        let _ = write!(out, "{k}={v}");
    }
    out
}

pub fn parse_labels(s: &str) -> Option<Labels> {
    if s.is_empty() {
        return Some(Labels::new());
    }
    s.split(';')
        .map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

pub fn format_bound(b: f64) -> String {
    if b.is_infinite() {
        "+Inf".to_string()
    } else {
        b.to_string()
    }
}

pub fn parse_bound(s: &str) -> Option<f64> {
    if s == "+Inf" {
        Some(f64::INFINITY)
    } else {
        s.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub timestamp_s: f64,
    pub name: String,
    pub labels: Labels,
    pub value: f64,
}

#[derive(Debug, Clone, Default)]
struct Series {
    samples: Vec<(SimTime, f64)>,
}

impl Series {
    fn window(&self, from: SimTime, to: SimTime) -> &[(SimTime, f64)] {
        let lo = self.samples.partition_point(|(t, _)| *t < from);
        let hi = self.samples.partition_point(|(t, _)| *t <= to);
        &self.samples[lo..hi]
    }
}

#[derive(Debug, Clone)]
pub struct MetricStore {
    scrape_interval: SimTime,
    series: BTreeMap<(String, Labels), Series>,
    scrapes: Vec<SimTime>,
}

impl MetricStore {
    pub fn new(scrape_interval_s: f64) -> Self {
        assert!(scrape_interval_s > 0.0, "scrape interval must be positive");
        Self {
            scrape_interval: SimTime::from_secs(scrape_interval_s),
            series: BTreeMap::new(),
            scrapes: Vec::new(),
        }
    }

    pub fn scrape_interval_s(&self) -> f64 {
        self.scrape_interval.as_secs()
    }

    pub fn scrape_times(&self) -> &[SimTime] {
        &self.scrapes
    }

    pub fn series_count(&self) -> usize {
        self.series.len()
    }

    pub fn sample_count(&self) -> usize {
        self.series.values().map(|s| s.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn clear(&mut self) {
        self.series.clear();
        self.scrapes.clear();
    }

    fn check_time(&self, t: SimTime) -> Result<(), MetricError> {
        if !t.ticks().is_multiple_of(self.scrape_interval.ticks()) {
            return Err(MetricError::Unaligned {
                t_s: t.as_secs(),
                interval_s: self.scrape_interval_s(),
            });
        }
        if self.scrapes.last().is_some_and(|&last| t <= last) {
            return Err(MetricError::NotIncreasing { t_s: t.as_secs() });
        }
        Ok(())
    }

    fn push(&mut self, name: &str, labels: Labels, t: SimTime, value: f64) {
        let series = self.series.entry((name.to_string(), labels)).or_default();
        debug_assert!(series.samples.last().is_none_or(|(last, _)| *last < t));
        series.samples.push((t, value));
    }

    /// Appends one sample of every simulated series at `t_s`, which must be
    /// scrape-aligned and equal to the simulation clock. Returns the number
    /// of series updated.
    pub fn scrape(&mut self, sim: &Simulation, t_s: f64) -> Result<usize, MetricError> {
        self.scrape_with(sim, t_s, &[])
    }

    /// Like [`scrape`](Self::scrape), with extra gauges sampled at the same
    /// instant.
    pub fn scrape_with(
        &mut self,
        sim: &Simulation,
        t_s: f64,
        extra_gauges: &[(&str, Labels, f64)],
    ) -> Result<usize, MetricError> {
        let t = SimTime::from_secs(t_s);
        self.check_time(t)?;
        if sim.clock() != t {
            return Err(MetricError::ClockMismatch {
                t_s,
                clock_s: sim.clock().as_secs(),
            });
        }
        for (name, _, _) in extra_gauges {
            if known_metric_kind(name).is_none() {
                return Err(MetricError::UnknownMetric(name.to_string()));
            }
        }
        let before = self.sample_count();
        let snap = sim.snapshot_resources();
        let bounds = sim.config().histogram_bounds_ms.clone();

        for (idx, svc) in snap.services.iter().enumerate() {
            let name = svc.name.as_str();
            self.push(KUBE_POD_INFO, labels([(SERVICE_LABEL, name)]), t, svc.ready_replicas as f64);
            self.push(
                CONTAINER_CPU_USAGE_SECONDS_TOTAL,
                labels([(SERVICE_LABEL, name)]),
                t,
                svc.cpu_seconds_total,
            );
            self.push(
                CONTAINER_MEMORY_USAGE_BYTES,
                labels([(SERVICE_LABEL, name)]),
                t,
                svc.memory_bytes as f64,
            );
            let spans = sim.span_stats(idx);
            for outcome in Outcome::ALL {
                let code = outcome.response_code().to_string();
                self.push(
                    ISTIO_REQUESTS_TOTAL,
                    labels([(DESTINATION_LABEL, name), (CODE_LABEL, &code)]),
                    t,
                    spans.count(outcome) as f64,
                );
                let cumulative = spans.cumulative(outcome);
                for (i, count) in cumulative.iter().enumerate() {
                    let le = format_bound(bounds.get(i).copied().unwrap_or(f64::INFINITY));
                    self.push(
                        ISTIO_REQUEST_DURATION_BUCKET,
                        labels([(DESTINATION_LABEL, name), (CODE_LABEL, &code), (LE_LABEL, &le)]),
                        t,
                        *count as f64,
                    );
                }
            }
        }

        let node = &snap.node;
        self.push(NODE_CPU_SECONDS_TOTAL, labels([(MODE_LABEL, "busy")]), t, node.cpu_busy_seconds);
        self.push(NODE_CPU_SECONDS_TOTAL, labels([(MODE_LABEL, "idle")]), t, node.cpu_idle_seconds);
        self.push(NODE_MEMORY_MEMTOTAL_BYTES, Labels::new(), t, node.memory_total_bytes as f64);
        self.push(NODE_MEMORY_MEMFREE_BYTES, Labels::new(), t, node.memory_free_bytes as f64);
        self.push(NODE_MEMORY_BUFFERS_BYTES, Labels::new(), t, 0.0);

        for (name, l, v) in extra_gauges {
            self.push(name, l.clone(), t, *v);
        }
        self.scrapes.push(t);
        Ok(self.sample_count() - before)
    }

    fn matching<'s, 'm>(
        &'s self,
        name: &'m str,
        matcher: &'m Labels,
    ) -> impl Iterator<Item = (&'s Labels, &'s Series)> + 'm
    where
        's: 'm,
    {
        self.series
            .range((name.to_string(), Labels::new())..)
            .take_while(move |((n, _), _)| n == name)
            .filter(move |((_, l), _)| matcher.iter().all(|(k, v)| l.get(k) == Some(v)))
            .map(|((_, l), s)| (l, s))
    }

    fn check_window(&self, window_s: f64) -> Result<(), MetricError> {
        let min_s = 2.0 * self.scrape_interval_s();
        if window_s < min_s {
            return Err(MetricError::WindowTooShort { window_s, min_s });
        }
        Ok(())
    }

    /// Per-second rate over `[t_s - window_s, t_s]`, summed over every
    /// series whose labels include `matcher`.
    ///
    /// Counters use `(last - first) / elapsed`; gauges use the time-weighted
    /// mean of the samples. `Ok(None)` means no matching series had two
    /// samples in the window.
    pub fn query_rate(
        &self,
        name: &str,
        matcher: &Labels,
        window_s: f64,
        t_s: f64,
    ) -> Result<Option<f64>, MetricError> {
        let kind = known_metric_kind(name).ok_or_else(|| MetricError::UnknownMetric(name.to_string()))?;
        self.check_window(window_s)?;
        let to = SimTime::from_secs(t_s);
        let from = SimTime::from_secs(t_s - window_s);
        let mut total = None;
        for (_, series) in self.matching(name, matcher) {
            let w = series.window(from, to);
            if w.len() < 2 {
                continue;
            }
            let (t0, v0) = w[0];
            let (t1, v1) = w[w.len() - 1];
            let elapsed = (t1 - t0).as_secs();
            let value = match kind {
                MetricKind::Counter => (v1 - v0) / elapsed,
                MetricKind::Gauge => {
                    w.windows(2).map(|p| p[0].1 * (p[1].0 - p[0].0).as_secs()).sum::<f64>() / elapsed
                }
            };
            *total.get_or_insert(0.0) += value;
        }
        Ok(total)
    }

    /// Sum of the latest sample at or before `t_s` over matching series.
    pub fn latest(&self, name: &str, matcher: &Labels, t_s: f64) -> Result<Option<f64>, MetricError> {
        known_metric_kind(name).ok_or_else(|| MetricError::UnknownMetric(name.to_string()))?;
        let to = SimTime::from_secs(t_s);
        let mut total = None;
        for (_, series) in self.matching(name, matcher) {
            let w = series.window(SimTime::ZERO, to);
            if let Some((_, v)) = w.last() {
                *total.get_or_insert(0.0) += v;
            }
        }
        Ok(total)
    }

    /// Histogram quantile of a service's request durations over the window,
    /// aggregated across response codes, with Prometheus
    /// `histogram_quantile` interpolation.
    pub fn query_latency_quantile(
        &self,
        service: &str,
        q: f64,
        window_s: f64,
        t_s: f64,
    ) -> Result<Option<f64>, MetricError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(MetricError::InvalidQuantile(q));
        }
        self.check_window(window_s)?;
        let to = SimTime::from_secs(t_s);
        let from = SimTime::from_secs(t_s - window_s);
        let matcher = labels([(DESTINATION_LABEL, service)]);
        let mut increases: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for (l, series) in self.matching(ISTIO_REQUEST_DURATION_BUCKET, &matcher) {
            let Some(bound) = l.get(LE_LABEL).and_then(|s| parse_bound(s)) else {
                continue;
            };
            let w = series.window(from, to);
            if w.len() < 2 {
                continue;
            }
            let inc = w[w.len() - 1].1 - w[0].1;
            increases.entry(bound.to_bits()).or_insert((bound, 0.0)).1 += inc;
        }
        let mut buckets: Vec<(f64, f64)> = increases.into_values().collect();
        buckets.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(histogram_quantile(q, &buckets))
    }

    /// All samples, sorted by `(timestamp, name, formatted labels)`.
    pub fn samples(&self) -> Vec<MetricSample> {
        let mut rows: Vec<(SimTime, &str, String, f64, &Labels)> = Vec::with_capacity(self.sample_count());
        for ((name, l), series) in &self.series {
            let ls = format_labels(l);
            for &(t, v) in &series.samples {
                rows.push((t, name, ls.clone(), v, l));
            }
        }
        rows.sort_by(|a, b| (a.0, a.1, &a.2).cmp(&(b.0, b.1, &b.2)));
        rows.into_iter()
            .map(|(t, n, _, v, l)| MetricSample {
                timestamp_s: t.as_secs(),
                name: n.to_string(),
                labels: l.clone(),
                value: v,
            })
            .collect()
    }

    /// Writes `timestamp_s,name,labels,value` rows and returns the number of
    /// data rows.
    pub fn export_csv(&self, out_path: impl AsRef<Path>) -> Result<usize> {
        let path = out_path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let io_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        w.write_record(CSV_HEADER).map_err(io_err)?;
        let samples = self.samples();
        for s in &samples {
            w.write_record([
                s.timestamp_s.to_string(),
                s.name.clone(),
                format_labels(&s.labels),
                s.value.to_string(),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(samples.len())
    }

    /// Rebuilds a store from an exported CSV. The scrape interval is taken
    /// as the smallest gap between distinct timestamps.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Evaluation(format!("{}: {other:?}", path.display())),
        })?;
        let bad = |row: usize, message: String| Error::Trace {
            path: path.to_path_buf(),
            row,
            message,
        };
        let headers = rdr.headers().map_err(|e| bad(0, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(bad(0, format!("expected header {}", CSV_HEADER.join(","))));
        }
        let mut series: BTreeMap<(String, Labels), Series> = BTreeMap::new();
        let mut times: Vec<SimTime> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| bad(row, e.to_string()))?;
            let t: f64 = rec[0].parse().map_err(|_| bad(row, format!("bad timestamp {:?}", &rec[0])))?;
            let name = rec[1].to_string();
            let l = parse_labels(&rec[2]).ok_or_else(|| bad(row, format!("bad labels {:?}", &rec[2])))?;
            let v: f64 = rec[3].parse().map_err(|_| bad(row, format!("bad value {:?}", &rec[3])))?;
            let t = SimTime::from_secs(t);
            if times.last() != Some(&t) {
                if times.last().is_some_and(|&last| t < last) {
                    return Err(bad(row, "rows are not sorted by timestamp".into()));
                }
                times.push(t);
            }
            series.entry((name, l)).or_default().samples.push((t, v));
        }
        let interval = times
            .windows(2)
            .map(|w| w[1] - w[0])
            .min()
            .unwrap_or(SimTime::from_secs(DEFAULT_SCRAPE_INTERVAL_S));
        Ok(Self {
            scrape_interval: interval,
            series,
            scrapes: times,
        })
    }

    /// Values of every series of `name` at scrape `t`, keyed by labels.
    pub fn values_at(&self, name: &str, t: SimTime) -> BTreeMap<&Labels, f64> {
        static ALL: Labels = Labels::new();
        self.matching(name, &ALL)
            .filter_map(|(l, s)| {
                let i = s.samples.binary_search_by_key(&t, |(ts, _)| *ts).ok()?;
                Some((l, s.samples[i].1))
            })
            .collect()
    }
}

/// Prometheus `histogram_quantile` over cumulative `(upper bound, count)`
/// buckets sorted by bound, the last being `+Inf`.
pub fn histogram_quantile(q: f64, buckets: &[(f64, f64)]) -> Option<f64> {
    let total = buckets.last()?.1;
    if !(total > 0.0) || !buckets.last()?.0.is_infinite() {
        return None;
    }
    let rank = q * total;
    let idx = buckets.iter().position(|&(_, c)| c >= rank)?;
    if buckets[idx].0.is_infinite() {
        return buckets.get(buckets.len().wrapping_sub(2)).map(|b| b.0);
    }
    let (upper, count) = buckets[idx];
    let (lower, below) = if idx == 0 {
        (0.0_f64.min(upper), 0.0)
    } else {
        buckets[idx - 1]
    };
    if idx == 0 && upper <= 0.0 {
        return Some(upper);
    }
    Some(lower + (upper - lower) * (rank - below) / (count - below))
}

/// Checks the store-wide invariants: counters never decrease, histogram
/// buckets are cumulative with `+Inf` equal to the matching request counter,
/// free memory plus container memory equals total memory, and per-container
/// CPU increases add up to the node's busy CPU increase. Returns every
/// violation found.
pub fn verify_integrity(store: &MetricStore) -> Vec<String> {
    let mut problems = Vec::new();

    for ((name, l), series) in &store.series {
        if known_metric_kind(name) == Some(MetricKind::Counter) {
            for w in series.samples.windows(2) {
                if w[1].1 < w[0].1 {
                    problems.push(format!(
                        "{name}{{{}}} decreased at {}s: {} -> {}",
                        format_labels(l),
                        w[1].0.as_secs(),
                        w[0].1,
                        w[1].1
                    ));
                }
            }
        }
    }

    let mut prev_cpu: Option<(BTreeMap<Labels, f64>, f64)> = None;
    for &t in store.scrape_times() {
        let ts = t.as_secs();

        // histogram cumulativity and +Inf == counter
        let mut hist: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
        for (l, v) in store.values_at(ISTIO_REQUEST_DURATION_BUCKET, t) {
            let (Some(svc), Some(code), Some(le)) = (l.get(DESTINATION_LABEL), l.get(CODE_LABEL), l.get(LE_LABEL)) else {
                problems.push(format!("histogram series with missing labels at {ts}s"));
                continue;
            };
            let Some(bound) = parse_bound(le) else {
                problems.push(format!("bad le {le:?}"));
                continue;
            };
            hist.entry((svc.clone(), code.clone())).or_default().push((bound, v));
        }
        let requests = store.values_at(ISTIO_REQUESTS_TOTAL, t);
        for ((svc, code), mut buckets) in hist {
            buckets.sort_by(|a, b| a.0.total_cmp(&b.0));
            if buckets.windows(2).any(|w| w[1].1 < w[0].1) {
                problems.push(format!("histogram {svc}/{code} not cumulative at {ts}s"));
            }
            let inf = buckets.last().map(|b| b.1).unwrap_or(0.0);
            let key = labels([(DESTINATION_LABEL, svc.as_str()), (CODE_LABEL, code.as_str())]);
            let counter = requests.get(&key).copied();
            if counter != Some(inf) {
                problems.push(format!(
                    "histogram {svc}/{code} +Inf {inf} != {ISTIO_REQUESTS_TOTAL} {counter:?} at {ts}s"
                ));
            }
        }

        // free-memory identity
        let total = store.values_at(NODE_MEMORY_MEMTOTAL_BYTES, t).values().sum::<f64>();
        let free = store.values_at(NODE_MEMORY_MEMFREE_BYTES, t).values().sum::<f64>();
        let used: f64 = store.values_at(CONTAINER_MEMORY_USAGE_BYTES, t).values().sum();
        if free + used != total {
            problems.push(format!("free {free} + used {used} != total {total} at {ts}s"));
        }

        // CPU cross-check between consecutive scrapes
        let containers: BTreeMap<Labels, f64> = store
            .values_at(CONTAINER_CPU_USAGE_SECONDS_TOTAL, t)
            .into_iter()
            .map(|(l, v)| (l.clone(), v))
            .collect();
        let busy = store
            .values_at(NODE_CPU_SECONDS_TOTAL, t)
            .into_iter()
            .find(|(l, _)| l.get(MODE_LABEL).map(String::as_str) == Some("busy"))
            .map(|(_, v)| v)
            .unwrap_or(f64::NAN);
        if let Some((prev_containers, prev_busy)) = &prev_cpu {
            let per_service: f64 = containers
                .iter()
                .map(|(l, v)| v - prev_containers.get(l).copied().unwrap_or(0.0))
                .sum();
            let node_inc = busy - prev_busy;
            if per_service != node_inc {
                problems.push(format!(
                    "container CPU increase {per_service} != node busy increase {node_inc} at {ts}s"
                ));
            }
        }
        prev_cpu = Some((containers, busy));
    }
    problems
}
