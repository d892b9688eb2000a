//! The scaler template and the lifecycle engine around it.
//!
//! A scaler implements three entry points: `register` (once, after the
//! benchmark starts), `scale` (every control interval) and `cancel` (once,
//! when load injection ends). It observes the system only through a
//! [`Monitor`] over scraped metrics and changes it only through an
//! [`Executor`], the simulated counterparts of a Prometheus client and a
//! Kubernetes API client.

use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::Simulation;
use crate::telemetry::{
    labels, Labels, MetricError, MetricStore, CONTAINER_CPU_USAGE_SECONDS_TOTAL, DESTINATION_LABEL,
    ISTIO_REQUESTS_TOTAL, KUBE_POD_INFO, SERVICE_LABEL,
};
use crate::time::SimTime;
use crate::topology::ServiceTopology;

pub const DEFAULT_CONTROL_INTERVAL_S: f64 = 15.0;
pub const DEFAULT_UTILIZATION_WINDOW_S: f64 = 60.0;

pub type ScalerError = Box<dyn std::error::Error + Send + Sync>;

/// A pluggable auto-scaling policy.
///
/// Implementations are plain state machines: the engine calls them from one
/// thread, never concurrently with themselves.
pub trait Scaler: Send {
    fn register(
        &mut self,
        monitor: &Monitor<'_>,
        executor: &mut Executor<'_>,
        topology: &ServiceTopology,
    ) -> Result<(), ScalerError> {
        let _ = (monitor, executor, topology);
        Ok(())
    }

    fn scale(&mut self, monitor: &Monitor<'_>, executor: &mut Executor<'_>) -> Result<(), ScalerError>;

    fn cancel(&mut self) {}
}

/// Read-only view of scraped metrics, frozen at the latest scrape at or
/// before the current control tick.
pub struct Monitor<'a> {
    store: &'a MetricStore,
    topology: &'a ServiceTopology,
    as_of: SimTime,
    utilization_window_s: f64,
}

impl<'a> Monitor<'a> {
    pub fn new(store: &'a MetricStore, topology: &'a ServiceTopology, tick: SimTime, utilization_window_s: f64) -> Self {
        let as_of = store
            .scrape_times()
            .iter()
            .rev()
            .find(|&&t| t <= tick)
            .copied()
            .unwrap_or(SimTime::ZERO);
        Self {
            store,
            topology,
            as_of,
            utilization_window_s,
        }
    }

    /// Time of the newest sample this view can see.
    pub fn as_of_s(&self) -> f64 {
        self.as_of.as_secs()
    }

    pub fn services(&self) -> impl Iterator<Item = &str> {
        self.topology.services.iter().map(|s| s.name.as_str())
    }

    pub fn entry_service(&self) -> &str {
        &self.topology.entry_service
    }

    pub fn scrape_interval_s(&self) -> f64 {
        self.store.scrape_interval_s()
    }

    pub fn query_rate(&self, name: &str, matcher: &Labels, window_s: f64) -> Result<Option<f64>, MetricError> {
        self.store.query_rate(name, matcher, window_s, self.as_of_s())
    }

    pub fn latency_quantile(&self, service: &str, q: f64, window_s: f64) -> Result<Option<f64>, MetricError> {
        self.store.query_latency_quantile(service, q, window_s, self.as_of_s())
    }

    /// Ready replicas at the latest scrape.
    pub fn replicas(&self, service: &str) -> Option<u32> {
        self.store
            .latest(KUBE_POD_INFO, &labels([(SERVICE_LABEL, service)]), self.as_of_s())
            .ok()
            .flatten()
            .map(|v| v as u32)
    }

    /// Completed requests per second at `service`, all response codes.
    pub fn request_rate(&self, service: &str, window_s: f64) -> Result<Option<f64>, MetricError> {
        self.query_rate(ISTIO_REQUESTS_TOTAL, &labels([(DESTINATION_LABEL, service)]), window_s)
    }

    /// CPU cores consumed per second at `service`.
    pub fn cpu_rate(&self, service: &str, window_s: f64) -> Result<Option<f64>, MetricError> {
        self.query_rate(CONTAINER_CPU_USAGE_SECONDS_TOTAL, &labels([(SERVICE_LABEL, service)]), window_s)
    }

    /// CPU rate divided by the time-averaged ready replica count over the
    /// default utilization window.
    pub fn cpu_utilization(&self, service: &str) -> Result<Option<f64>, MetricError> {
        self.cpu_utilization_over(service, self.utilization_window_s)
    }

    pub fn cpu_utilization_over(&self, service: &str, window_s: f64) -> Result<Option<f64>, MetricError> {
        let cpu = self.cpu_rate(service, window_s)?;
        let pods = self.query_rate(KUBE_POD_INFO, &labels([(SERVICE_LABEL, service)]), window_s)?;
        Ok(match (cpu, pods) {
            (Some(c), Some(p)) if p > 0.0 => Some(c / p),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ActionStatus {
    Ok,
    Failed,
}

impl ActionStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionStatus::Ok => "ok",
            ActionStatus::Failed => "failed",
        }
    }
}

/// One row of the action log. A failed tick is recorded with no service.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingAction {
    pub tick_s: f64,
    pub scaler_id: String,
    pub service: String,
    pub requested: Option<u32>,
    pub clamped: Option<u32>,
    pub status: ActionStatus,
}

pub const ACTIONS_CSV_HEADER: [&str; 6] = ["tick_s", "scaler_id", "service", "requested", "clamped", "status"];

/// Write access to the simulated cluster: replica counts only.
pub struct Executor<'a> {
    sim: &'a mut Simulation,
    scaler_id: &'a str,
    tick: SimTime,
    log: &'a mut Vec<ScalingAction>,
}

impl<'a> Executor<'a> {
    pub fn new(sim: &'a mut Simulation, scaler_id: &'a str, log: &'a mut Vec<ScalingAction>) -> Self {
        let tick = sim.clock();
        Self {
            sim,
            scaler_id,
            tick,
            log,
        }
    }

    /// Desired replica count currently set for the service (ready plus
    /// starting, minus draining).
    pub fn target_replicas(&self, service: &str) -> Result<u32> {
        let idx = self.index(service)?;
        Ok(self.sim.target_replicas(idx))
    }

    pub fn bounds(&self, service: &str) -> Result<(u32, u32)> {
        let spec = self
            .sim
            .topology()
            .service(service)
            .ok_or_else(|| Error::UnknownService(service.to_string()))?;
        Ok((spec.min_replicas, spec.max_replicas))
    }

    /// Sets the desired replica count, clamped to the service bounds.
    /// Returns the clamped value.
    pub fn set_replicas(&mut self, service: &str, requested: u32) -> Result<u32> {
        let clamped = self.sim.set_replicas(service, requested)?;
        self.log.push(ScalingAction {
            tick_s: self.tick.as_secs(),
            scaler_id: self.scaler_id.to_string(),
            service: service.to_string(),
            requested: Some(requested),
            clamped: Some(clamped),
            status: ActionStatus::Ok,
        });
        Ok(clamped)
    }

    fn index(&self, service: &str) -> Result<usize> {
        self.sim
            .topology()
            .service_index(service)
            .ok_or_else(|| Error::UnknownService(service.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Created,
    Registered,
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LifecycleEvent {
    Register { t_s: f64 },
    Tick { t_s: f64, ok: bool },
    Cancel { t_s: f64 },
}

/// Owns a scaler for one run and enforces created -> registered -> cancelled.
pub struct ScalerHandle {
    scaler: Box<dyn Scaler>,
    scaler_id: String,
    control_interval: SimTime,
    utilization_window_s: f64,
    state: Lifecycle,
    actions: Vec<ScalingAction>,
    events: Vec<LifecycleEvent>,
}

impl std::fmt::Debug for ScalerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalerHandle")
            .field("scaler_id", &self.scaler_id)
            .field("state", &self.state)
            .field("actions", &self.actions.len())
            .finish()
    }
}

impl ScalerHandle {
    pub fn new(scaler_id: impl Into<String>, scaler: Box<dyn Scaler>, control_interval_s: f64) -> Self {
        assert!(control_interval_s > 0.0, "control interval must be positive");
        Self {
            scaler,
            scaler_id: scaler_id.into(),
            control_interval: SimTime::from_secs(control_interval_s),
            utilization_window_s: DEFAULT_UTILIZATION_WINDOW_S,
            state: Lifecycle::Created,
            actions: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn with_utilization_window(mut self, window_s: f64) -> Self {
        self.utilization_window_s = window_s;
        self
    }

    pub fn scaler_id(&self) -> &str {
        &self.scaler_id
    }

    pub fn state(&self) -> Lifecycle {
        self.state
    }

    pub fn control_interval(&self) -> SimTime {
        self.control_interval
    }

    pub fn actions(&self) -> &[ScalingAction] {
        &self.actions
    }

    pub fn lifecycle_events(&self) -> &[LifecycleEvent] {
        &self.events
    }

    /// First control tick strictly after `t`.
    pub fn next_tick_after(&self, t: SimTime) -> SimTime {
        let k = t.ticks() / self.control_interval.ticks() + 1;
        SimTime(k * self.control_interval.ticks())
    }

    pub fn register(&mut self, store: &MetricStore, sim: &mut Simulation) -> Result<()> {
        if self.state != Lifecycle::Created {
            return Err(Error::Lifecycle(format!(
                "register called on scaler {} in state {:?}",
                self.scaler_id, self.state
            )));
        }
        let topology = sim.topology().clone();
        let now = sim.clock();
        let monitor = Monitor::new(store, &topology, now, self.utilization_window_s);
        let mut executor = Executor::new(sim, &self.scaler_id, &mut self.actions);
        self.scaler
            .register(&monitor, &mut executor, &topology)
            .map_err(|e| Error::Lifecycle(format!("scaler {} failed to register: {e}", self.scaler_id)))?;
        self.state = Lifecycle::Registered;
        self.events.push(LifecycleEvent::Register { t_s: now.as_secs() });
        Ok(())
    }

    /// Runs one control tick at the simulation clock. Faults raised by the
    /// scaler (errors or panics) are contained: the tick is logged as failed
    /// and the run continues. Returns the number of actions issued.
    pub fn drive_tick(&mut self, store: &MetricStore, sim: &mut Simulation) -> Result<usize> {
        if self.state != Lifecycle::Registered {
            return Err(Error::Lifecycle(format!(
                "tick on scaler {} in state {:?}",
                self.scaler_id, self.state
            )));
        }
        let now = sim.clock();
        let before = self.actions.len();
        let topology = sim.topology().clone();
        let monitor = Monitor::new(store, &topology, now, self.utilization_window_s);
        let scaler = &mut self.scaler;
        let mut executor = Executor::new(sim, &self.scaler_id, &mut self.actions);
        let outcome = catch_unwind(AssertUnwindSafe(|| scaler.scale(&monitor, &mut executor)));
        let fault = match outcome {
            Ok(Ok(())) => None,
            Ok(Err(e)) => Some(e.to_string()),
            Err(panic) => Some(
                panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".to_string()),
            ),
        };
        if let Some(msg) = &fault {
            log::warn!("scaler {} failed at t={}s: {msg}", self.scaler_id, now.as_secs());
            self.actions.push(ScalingAction {
                tick_s: now.as_secs(),
                scaler_id: self.scaler_id.clone(),
                service: String::new(),
                requested: None,
                clamped: None,
                status: ActionStatus::Failed,
            });
        }
        self.events.push(LifecycleEvent::Tick {
            t_s: now.as_secs(),
            ok: fault.is_none(),
        });
        Ok(self.actions[before..]
            .iter()
            .filter(|a| a.status == ActionStatus::Ok)
            .count())
    }

    /// Cancels the scaler and returns the complete action log.
    pub fn cancel(&mut self, t: SimTime) -> Result<&[ScalingAction]> {
        if self.state != Lifecycle::Registered {
            return Err(Error::Lifecycle(format!(
                "cancel called on scaler {} in state {:?}",
                self.scaler_id, self.state
            )));
        }
        self.scaler.cancel();
        self.state = Lifecycle::Cancelled;
        self.events.push(LifecycleEvent::Cancel { t_s: t.as_secs() });
        Ok(&self.actions)
    }
}

/// Writes `tick_s,scaler_id,service,requested,clamped,status`, sorted by tick.
pub fn write_actions_csv(actions: &[ScalingAction], path: &std::path::Path) -> Result<usize> {
    let mut rows: Vec<&ScalingAction> = actions.iter().collect();
    rows.sort_by(|a, b| a.tick_s.total_cmp(&b.tick_s));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(ACTIONS_CSV_HEADER).map_err(|e| csv_err(path, e))?;
    let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
    for a in &rows {
        w.write_record([
            a.tick_s.to_string(),
            a.scaler_id.clone(),
            a.service.clone(),
            opt(a.requested),
            opt(a.clamped),
            a.status.as_str().to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

pub fn read_actions_csv(path: &std::path::Path) -> Result<Vec<ScalingAction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |m: &str| Error::Trace {
            path: path.to_path_buf(),
            row: i + 1,
            message: m.to_string(),
        };
        if rec.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let opt = |s: &str| -> Result<Option<u32>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad replica count"))
            }
        };
        out.push(ScalingAction {
            tick_s: rec[0].parse().map_err(|_| bad("bad tick"))?,
            scaler_id: rec[1].to_string(),
            service: rec[2].to_string(),
            requested: opt(&rec[3])?,
            clamped: opt(&rec[4])?,
            status: match &rec[5] {
                "ok" => ActionStatus::Ok,
                "failed" => ActionStatus::Failed,
                _ => return Err(bad("bad status")),
            },
        });
    }
    Ok(out)
}

fn csv_err(path: &std::path::Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Evaluation(format!("{}: {other:?}", path.display())),
    }
}
