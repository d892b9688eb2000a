//! Discrete-event simulation of a microservice call graph.
//!
//! Each service is a pool of identical replicas sharing one FCFS queue
//! (M/M/c when service times are exponential). A request enters at the entry
//! service; once a replica finishes serving it, the downstream calls of that
//! service run one after another in declared edge order, and the span at the
//! service closes when the last of them returns. The replica is released as
//! soon as its own service time ends.
//!
//! Events are ordered by `(time, insertion sequence)`. External drivers (the
//! workload injector, scrapers, control loops) schedule opaque wake-up tokens
//! on the same queue and pull them back out through [`Simulation::step`], so
//! every agent interleaves strictly by simulated time.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::time::{SimTime, TICKS_PER_SECOND};
use crate::topology::{ServiceTimeDistribution, ServiceTopology};

/// Istio's default request-duration buckets in milliseconds (the implicit
/// `+Inf` bucket is not listed).
pub const ISTIO_DURATION_BUCKETS_MS: [f64; 16] = [
    0.5, 1.0, 5.0, 10.0, 25.0, 50.0, 100.0, 250.0, 500.0, 1000.0, 2500.0, 5000.0, 10000.0, 30000.0,
    60000.0, 300000.0,
];

pub const BYTES_PER_MB: f64 = 1_048_576.0;

/// CPU accounting resolution: 1/1024 core.
const CPU_SHARES_PER_CORE: u64 = 1024;
/// Divisor turning `ticks x shares` into core-seconds (2^30).
const CPU_UNITS_PER_CORE_SECOND: f64 = (TICKS_PER_SECOND * CPU_SHARES_PER_CORE) as f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub startup_delay_s: f64,
    pub node_cpu_cores: u32,
    pub node_memory_bytes: u64,
    pub histogram_bounds_ms: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            startup_delay_s: 10.0,
            node_cpu_cores: 32,
            node_memory_bytes: 96 * 1024 * 1024 * 1024,
            histogram_bounds_ms: ISTIO_DURATION_BUCKETS_MS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Timeout,
    Dropped,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Success, Outcome::Timeout, Outcome::Dropped];

    pub fn response_code(self) -> u16 {
        match self {
            Outcome::Success => 200,
            Outcome::Timeout => 408,
            Outcome::Dropped => 503,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Timeout => "timeout",
            Outcome::Dropped => "dropped",
        }
    }

    pub fn parse(s: &str) -> Option<Outcome> {
        match s {
            "success" => Some(Outcome::Success),
            "timeout" => Some(Outcome::Timeout),
            "dropped" => Some(Outcome::Dropped),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

pub type RequestId = u64;

/// A resolved request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestRecord {
    pub id: RequestId,
    pub arrival: SimTime,
    pub completion: SimTime,
    pub outcome: Outcome,
}

impl RequestRecord {
    pub fn arrival_time_s(&self) -> f64 {
        self.arrival.as_secs()
    }

    pub fn completion_time_s(&self) -> f64 {
        self.completion.as_secs()
    }

    pub fn latency_ms(&self) -> f64 {
        (self.completion - self.arrival).as_millis()
    }
}

/// Something the driver has to react to.
#[derive(Debug, Clone, PartialEq)]
pub enum Occurrence {
    Completed(RequestRecord),
    External { time: SimTime, token: u64 },
}

/// A change of a service's ready replica count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaChange {
    pub time: SimTime,
    pub service: usize,
    pub ready: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceSnapshot {
    pub name: String,
    pub ready_replicas: u32,
    pub busy_replicas: u32,
    pub pending_replicas: u32,
    pub queue_length: usize,
    pub cpu_rate_cores: f64,
    pub cpu_seconds_total: f64,
    pub memory_mb: f64,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSnapshot {
    pub cpu_cores: u32,
    pub cpu_busy_seconds: f64,
    pub cpu_idle_seconds: f64,
    pub memory_total_bytes: u64,
    pub memory_used_bytes: u64,
    pub memory_free_bytes: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceSnapshot {
    pub time_s: f64,
    pub services: Vec<ServiceSnapshot>,
    pub node: NodeSnapshot,
}

/// Cumulative per-service span statistics, split by outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanStats {
    pub counts: [u64; 3],
    /// Non-cumulative bucket counts per outcome; the last slot is `+Inf`.
    pub buckets: [Vec<u64>; 3],
}

impl SpanStats {
    fn new(n_bounds: usize) -> Self {
        Self {
            counts: [0; 3],
            buckets: std::array::from_fn(|_| vec![0; n_bounds + 1]),
        }
    }

    pub fn count(&self, outcome: Outcome) -> u64 {
        self.counts[outcome.index()]
    }

    /// Cumulative counts (`le` semantics) for one outcome, ending with `+Inf`.
    pub fn cumulative(&self, outcome: Outcome) -> Vec<u64> {
        let mut acc = 0;
        self.buckets[outcome.index()]
            .iter()
            .map(|c| {
                acc += c;
                acc
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct PendingReplica {
    id: u64,
}

#[derive(Debug, Clone)]
struct Pool {
    ready: u32,
    busy: u32,
    retiring: u32,
    pending: Vec<PendingReplica>,
    queue: VecDeque<RequestId>,
    cpu_shares: u64,
    cpu_units: u128,
    cpu_updated: SimTime,
    spans: SpanStats,
}

impl Pool {
    fn idle(&self) -> u32 {
        self.ready - self.busy
    }

    fn account(&mut self, now: SimTime) {
        let dt = (now - self.cpu_updated).ticks() as u128;
        self.cpu_units += dt * self.busy as u128 * self.cpu_shares as u128;
        self.cpu_updated = now;
    }

    fn cpu_units_at(&self, now: SimTime) -> u128 {
        let dt = (now - self.cpu_updated).ticks() as u128;
        self.cpu_units + dt * self.busy as u128 * self.cpu_shares as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Waiting(usize),
    InService(usize),
    Calling,
}

#[derive(Debug, Clone)]
struct Frame {
    service: usize,
    start: SimTime,
    /// Downstream calls still to issue, in reverse order (next call last).
    calls: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Request {
    arrival: SimTime,
    frames: Vec<Frame>,
    phase: Phase,
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival(RequestId),
    ServiceDone { service: usize, request: RequestId },
    ReplicaReady { service: usize, replica: u64 },
    Timeout(RequestId),
    External(u64),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Totals since the simulation was built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RequestCounts {
    pub injected: u64,
    pub success: u64,
    pub timeout: u64,
    pub dropped: u64,
}

impl RequestCounts {
    pub fn completed(&self) -> u64 {
        self.success + self.timeout + self.dropped
    }

    pub fn in_flight(&self) -> u64 {
        self.injected - self.completed()
    }
}

/// The full mutable state of one simulated benchmark run.
#[derive(Debug, Clone)]
pub struct Simulation {
    topology: ServiceTopology,
    config: SimConfig,
    seed: u64,
    rng: SimRng,
    clock: SimTime,
    events: BinaryHeap<Event>,
    next_seq: u64,
    next_request: RequestId,
    next_replica: u64,
    pools: Vec<Pool>,
    adjacency: Vec<Vec<(usize, f64)>>,
    entry: usize,
    timeout: SimTime,
    startup_delay: SimTime,
    requests: HashMap<RequestId, Request>,
    counts: RequestCounts,
    in_system: u64,
    in_system_area: u128,
    in_system_updated: SimTime,
    replica_log: Vec<ReplicaChange>,
    fired_externals: Vec<(SimTime, u64)>,
}

/// Validates the topology and builds a fresh state with the default config.
pub fn build_simulation(topology: &ServiceTopology, seed: u64) -> Result<Simulation> {
    Simulation::new(topology.clone(), seed, SimConfig::default())
}

impl Simulation {
    pub fn new(topology: ServiceTopology, seed: u64, config: SimConfig) -> Result<Self> {
        topology.validate().map_err(|source| Error::Topology { path: None, source })?;
        let n_bounds = config.histogram_bounds_ms.len();
        let pools = topology
            .services
            .iter()
            .map(|s| Pool {
                ready: s.initial_replicas,
                busy: 0,
                retiring: 0,
                pending: Vec::new(),
                queue: VecDeque::new(),
                cpu_shares: (s.cores_per_busy_replica() * CPU_SHARES_PER_CORE as f64).round() as u64,
                cpu_units: 0,
                cpu_updated: SimTime::ZERO,
                spans: SpanStats::new(n_bounds),
            })
            .collect();
        Ok(Self {
            adjacency: topology.adjacency(),
            entry: topology.entry_index(),
            timeout: SimTime::from_millis(topology.timeout_ms),
            startup_delay: SimTime::from_secs(config.startup_delay_s),
            topology,
            config,
            seed,
            rng: SimRng::new(seed),
            clock: SimTime::ZERO,
            events: BinaryHeap::new(),
            next_seq: 0,
            next_request: 0,
            next_replica: 0,
            pools,
            requests: HashMap::new(),
            counts: RequestCounts::default(),
            in_system: 0,
            in_system_area: 0,
            in_system_updated: SimTime::ZERO,
            replica_log: Vec::new(),
            fired_externals: Vec::new(),
        })
    }

    pub fn topology(&self) -> &ServiceTopology {
        &self.topology
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn counts(&self) -> RequestCounts {
        self.counts
    }

    pub fn rng_mut(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn replica_log(&self) -> &[ReplicaChange] {
        &self.replica_log
    }

    pub fn service_count(&self) -> usize {
        self.pools.len()
    }

    pub fn ready_replicas(&self, service: usize) -> u32 {
        self.pools[service].ready
    }

    pub fn busy_replicas(&self, service: usize) -> u32 {
        self.pools[service].busy
    }

    pub fn queue_length(&self, service: usize) -> usize {
        self.pools[service].queue.len()
    }

    /// Replica count the service is converging to: ready, minus replicas
    /// draining for retirement, plus replicas still starting.
    pub fn target_replicas(&self, service: usize) -> u32 {
        let p = &self.pools[service];
        p.ready - p.retiring + p.pending.len() as u32
    }

    pub fn span_stats(&self, service: usize) -> &SpanStats {
        &self.pools[service].spans
    }

    pub fn is_idle(&self) -> bool {
        self.events.is_empty()
    }

    /// Integral of the number of requests in the system over time, in
    /// request-seconds, up to the current clock.
    pub fn in_system_area_secs(&self) -> f64 {
        let dt = (self.clock - self.in_system_updated).ticks() as u128;
        (self.in_system_area + dt * self.in_system as u128) as f64 / TICKS_PER_SECOND as f64
    }

    pub fn in_system(&self) -> u64 {
        self.in_system
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        debug_assert!(time >= self.clock);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(Event { time, seq, kind });
    }

    /// Queues a wake-up that [`step`](Self::step) hands back to the caller.
    pub fn schedule_external(&mut self, time: SimTime, token: u64) {
        assert!(time >= self.clock, "external event scheduled in the past");
        self.schedule(time, EventKind::External(token));
    }

    /// Schedules a request to arrive at the entry service.
    pub fn inject_request(&mut self, arrival: SimTime) -> RequestId {
        assert!(arrival >= self.clock, "arrival scheduled before the clock");
        let id = self.next_request;
        self.next_request += 1;
        self.counts.injected += 1;
        self.schedule(arrival, EventKind::Arrival(id));
        id
    }

    pub fn inject_request_at(&mut self, arrival_time_s: f64) -> RequestId {
        self.inject_request(SimTime::from_secs(arrival_time_s))
    }

    /// Processes events up to `limit` and stops at the first one the caller
    /// must see. Returns `None` once nothing is left at or before `limit`,
    /// with the clock moved to `limit`.
    pub fn step(&mut self, limit: SimTime) -> Option<Occurrence> {
        while let Some(ev) = self.events.peek() {
            if ev.time > limit {
                break;
            }
            let ev = self.events.pop().unwrap();
            self.clock = ev.time;
            if let Some(occ) = self.dispatch(ev) {
                return Some(occ);
            }
        }
        if limit > self.clock {
            self.clock = limit;
        }
        None
    }

    /// Processes every event at or before `t`. External wake-ups met on the
    /// way are kept in [`take_fired_externals`](Self::take_fired_externals).
    pub fn advance_to(&mut self, t: SimTime) -> Vec<RequestRecord> {
        let mut done = Vec::new();
        while let Some(occ) = self.step(t) {
            match occ {
                Occurrence::Completed(r) => done.push(r),
                Occurrence::External { time, token } => self.fired_externals.push((time, token)),
            }
        }
        done
    }

    pub fn advance_to_secs(&mut self, t_s: f64) -> Vec<RequestRecord> {
        self.advance_to(SimTime::from_secs(t_s))
    }

    pub fn take_fired_externals(&mut self) -> Vec<(SimTime, u64)> {
        std::mem::take(&mut self.fired_externals)
    }

    fn dispatch(&mut self, ev: Event) -> Option<Occurrence> {
        match ev.kind {
            EventKind::Arrival(id) => self.on_arrival(id),
            EventKind::ServiceDone { service, request } => self.on_service_done(service, request),
            EventKind::ReplicaReady { service, replica } => {
                self.on_replica_ready(service, replica);
                None
            }
            EventKind::Timeout(id) => {
                if self.requests.contains_key(&id) {
                    Some(Occurrence::Completed(self.fail(id, Outcome::Timeout)))
                } else {
                    None
                }
            }
            EventKind::External(token) => Some(Occurrence::External {
                time: ev.time,
                token,
            }),
        }
    }

    fn track_in_system(&mut self, delta: i64) {
        let dt = (self.clock - self.in_system_updated).ticks() as u128;
        self.in_system_area += dt * self.in_system as u128;
        self.in_system_updated = self.clock;
        self.in_system = (self.in_system as i64 + delta) as u64;
    }

    fn on_arrival(&mut self, id: RequestId) -> Option<Occurrence> {
        let now = self.clock;
        self.track_in_system(1);
        self.requests.insert(
            id,
            Request {
                arrival: now,
                frames: Vec::with_capacity(4),
                phase: Phase::Calling,
            },
        );
        self.schedule(now + self.timeout, EventKind::Timeout(id));
        self.call(id, self.entry).map(Occurrence::Completed)
    }

    /// Opens a span for `id` at `service`. Returns a record if the call was
    /// dropped, which fails the whole request.
    fn call(&mut self, id: RequestId, service: usize) -> Option<RequestRecord> {
        let now = self.clock;
        let req = self.requests.get_mut(&id).expect("live request");
        req.frames.push(Frame {
            service,
            start: now,
            calls: Vec::new(),
        });
        let capacity = self.topology.services[service].queue_capacity as usize;
        let pool = &self.pools[service];
        if pool.idle() > 0 {
            self.start_service(id, service);
            None
        } else if pool.queue.len() < capacity {
            self.pools[service].queue.push_back(id);
            self.requests.get_mut(&id).unwrap().phase = Phase::Waiting(service);
            None
        } else {
            Some(self.fail(id, Outcome::Dropped))
        }
    }

    fn service_time(&mut self, service: usize) -> SimTime {
        let mu = self.topology.services[service].service_rate_mu;
        let secs = match self.topology.service_time {
            ServiceTimeDistribution::Exponential => self.rng.exponential(mu),
            ServiceTimeDistribution::Deterministic => 1.0 / mu,
        };
        SimTime::from_secs(secs)
    }

    fn start_service(&mut self, id: RequestId, service: usize) {
        let now = self.clock;
        let pool = &mut self.pools[service];
        pool.account(now);
        pool.busy += 1;
        debug_assert!(pool.busy <= pool.ready);
        self.requests.get_mut(&id).unwrap().phase = Phase::InService(service);
        let d = self.service_time(service);
        self.schedule(now + d, EventKind::ServiceDone { service, request: id });
    }

    fn dispatch_queue(&mut self, service: usize) {
        while self.pools[service].idle() > 0 {
            let Some(next) = self.pools[service].queue.pop_front() else {
                break;
            };
            self.start_service(next, service);
        }
    }

    fn on_service_done(&mut self, service: usize, id: RequestId) -> Option<Occurrence> {
        let now = self.clock;
        let pool = &mut self.pools[service];
        pool.account(now);
        pool.busy -= 1;
        if pool.retiring > 0 {
            pool.retiring -= 1;
            pool.ready -= 1;
            let ready = pool.ready;
            self.replica_log.push(ReplicaChange {
                time: now,
                service,
                ready,
            });
        } else {
            self.dispatch_queue(service);
        }

        // The request may have timed out while in service.
        if !self.requests.contains_key(&id) {
            return None;
        }
        let mut calls = Vec::new();
        for i in 0..self.adjacency[service].len() {
            let (callee, rate) = self.adjacency[service][i];
            let whole = rate.trunc();
            let frac = rate - whole;
            let mut n = whole as u64;
            if frac > 0.0 && self.rng.bernoulli(frac) {
                n += 1;
            }
            calls.extend(std::iter::repeat_n(callee, n as usize));
        }
        calls.reverse();
        let req = self.requests.get_mut(&id).unwrap();
        req.phase = Phase::Calling;
        req.frames.last_mut().unwrap().calls = calls;
        self.proceed(id).map(Occurrence::Completed)
    }

    /// Issues the next pending downstream call, or unwinds finished spans.
    fn proceed(&mut self, id: RequestId) -> Option<RequestRecord> {
        loop {
            let now = self.clock;
            let req = self.requests.get_mut(&id).unwrap();
            let frame = req.frames.last_mut().unwrap();
            if let Some(callee) = frame.calls.pop() {
                return self.call(id, callee);
            }
            let frame = req.frames.pop().unwrap();
            let done = req.frames.is_empty();
            let arrival = req.arrival;
            self.record_span(frame.service, now - frame.start, Outcome::Success);
            if done {
                self.requests.remove(&id);
                self.track_in_system(-1);
                self.counts.success += 1;
                return Some(RequestRecord {
                    id,
                    arrival,
                    completion: now,
                    outcome: Outcome::Success,
                });
            }
        }
    }

    fn fail(&mut self, id: RequestId, outcome: Outcome) -> RequestRecord {
        let now = self.clock;
        let req = self.requests.remove(&id).expect("live request");
        if let Phase::Waiting(service) = req.phase {
            let q = &mut self.pools[service].queue;
            if let Some(pos) = q.iter().position(|&r| r == id) {
                q.remove(pos);
            }
        }
        for frame in req.frames.iter().rev() {
            self.record_span(frame.service, now - frame.start, outcome);
        }
        self.track_in_system(-1);
        match outcome {
            Outcome::Success => self.counts.success += 1,
            Outcome::Timeout => self.counts.timeout += 1,
            Outcome::Dropped => self.counts.dropped += 1,
        }
        RequestRecord {
            id,
            arrival: req.arrival,
            completion: now,
            outcome,
        }
    }

    fn record_span(&mut self, service: usize, duration: SimTime, outcome: Outcome) {
        let ms = duration.as_millis();
        let bucket = self
            .config
            .histogram_bounds_ms
            .iter()
            .position(|&b| ms <= b)
            .unwrap_or(self.config.histogram_bounds_ms.len());
        let spans = &mut self.pools[service].spans;
        spans.counts[outcome.index()] += 1;
        spans.buckets[outcome.index()][bucket] += 1;
    }

    fn on_replica_ready(&mut self, service: usize, replica: u64) {
        let pool = &mut self.pools[service];
        let Some(pos) = pool.pending.iter().position(|p| p.id == replica) else {
            return;
        };
        pool.pending.remove(pos);
        pool.account(self.clock);
        pool.ready += 1;
        let ready = pool.ready;
        self.replica_log.push(ReplicaChange {
            time: self.clock,
            service,
            ready,
        });
        self.dispatch_queue(service);
    }

    /// Scales `service` toward `target` at the current clock and returns the
    /// target after clamping to the service's bounds.
    ///
    /// New replicas become ready after the startup delay. Scale-down cancels
    /// starting replicas first, then removes idle ones, then marks busy ones
    /// to retire once their current request finishes.
    pub fn set_replicas(&mut self, service: &str, target: u32) -> Result<u32> {
        let idx = self
            .topology
            .service_index(service)
            .ok_or_else(|| Error::UnknownService(service.to_string()))?;
        Ok(self.set_replicas_by_index(idx, target))
    }

    pub fn set_replicas_by_index(&mut self, service: usize, target: u32) -> u32 {
        let clamped = self.topology.services[service].clamp_replicas(target);
        let now = self.clock;
        let current = self.target_replicas(service);
        if clamped > current {
            let mut need = clamped - current;
            let pool = &mut self.pools[service];
            let reinstated = pool.retiring.min(need);
            pool.retiring -= reinstated;
            need -= reinstated;
            for _ in 0..need {
                let id = self.next_replica;
                self.next_replica += 1;
                self.pools[service].pending.push(PendingReplica { id });
                self.schedule(
                    now + self.startup_delay,
                    EventKind::ReplicaReady { service, replica: id },
                );
            }
        } else if clamped < current {
            let mut excess = current - clamped;
            let pool = &mut self.pools[service];
            while excess > 0 && pool.pending.pop().is_some() {
                excess -= 1;
            }
            let idle_removed = pool.idle().min(excess);
            if idle_removed > 0 {
                pool.account(now);
                pool.ready -= idle_removed;
                excess -= idle_removed;
                let ready = pool.ready;
                self.replica_log.push(ReplicaChange {
                    time: now,
                    service,
                    ready,
                });
            }
            self.pools[service].retiring += excess;
        }
        clamped
    }

    pub fn snapshot_resources(&self) -> ResourceSnapshot {
        let now = self.clock;
        let mut services = Vec::with_capacity(self.pools.len());
        let mut busy_units: u128 = 0;
        let mut used_bytes: u64 = 0;
        for (spec, pool) in self.topology.services.iter().zip(&self.pools) {
            let units = pool.cpu_units_at(now);
            busy_units += units;
            // ready x (base + (busy / ready) x per_util), expanded.
            let memory_mb =
                pool.ready as f64 * spec.base_memory_mb + pool.busy as f64 * spec.memory_per_utilization_mb;
            let memory_bytes = (memory_mb * BYTES_PER_MB).round() as u64;
            used_bytes += memory_bytes;
            services.push(ServiceSnapshot {
                name: spec.name.clone(),
                ready_replicas: pool.ready,
                busy_replicas: pool.busy,
                pending_replicas: pool.pending.len() as u32,
                queue_length: pool.queue.len(),
                cpu_rate_cores: pool.busy as f64 * pool.cpu_shares as f64 / CPU_SHARES_PER_CORE as f64,
                cpu_seconds_total: units as f64 / CPU_UNITS_PER_CORE_SECOND,
                memory_mb,
                memory_bytes,
            });
        }
        let capacity_units =
            now.ticks() as i128 * self.config.node_cpu_cores as i128 * CPU_SHARES_PER_CORE as i128;
        let node = NodeSnapshot {
            cpu_cores: self.config.node_cpu_cores,
            cpu_busy_seconds: busy_units as f64 / CPU_UNITS_PER_CORE_SECOND,
            cpu_idle_seconds: (capacity_units - busy_units as i128) as f64 / CPU_UNITS_PER_CORE_SECOND,
            memory_total_bytes: self.config.node_memory_bytes,
            memory_used_bytes: used_bytes,
            memory_free_bytes: self.config.node_memory_bytes as i64 - used_bytes as i64,
        };
        ResourceSnapshot {
            time_s: now.as_secs(),
            services,
            node,
        }
    }
}
