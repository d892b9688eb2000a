//! Trace-driven load generation.
//!
//! A trace is a step function of concurrent users over time. In the default
//! closed-loop model each user issues a request to the entry service, waits
//! for the response, thinks for an exponential time and repeats, like a
//! Locust user. The open-loop model instead issues Poisson arrivals at a
//! fixed rate per user.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaler::ScalerHandle;
use crate::sim::{Occurrence, Outcome, RequestId, RequestRecord, Simulation};
use crate::telemetry::{Labels, MetricStore, LOCUST_USERS};
use crate::time::SimTime;

pub const TRACE_HEADER: [&str; 2] = ["offset_s", "user_count"];
/// Length of the final step when the trace has a single row.
pub const SINGLE_STEP_DURATION_S: f64 = 60.0;
pub const DEFAULT_DRAIN_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub offset_s: f64,
    pub user_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadTrace {
    steps: Vec<TraceStep>,
    duration_s: f64,
}

impl LoadTrace {
    /// Validates the steps. Without an explicit duration the last step lasts
    /// as long as the one before it.
    pub fn new(steps: Vec<TraceStep>, duration_s: Option<f64>) -> Result<Self, String> {
        let Some(first) = steps.first() else {
            return Err("trace has no steps".into());
        };
        if first.offset_s != 0.0 {
            return Err(format!("first offset must be 0, got {}", first.offset_s));
        }
        for (i, w) in steps.windows(2).enumerate() {
            if !(w[1].offset_s > w[0].offset_s) || !w[1].offset_s.is_finite() {
                return Err(format!("row {}: offsets must be strictly increasing", i + 2));
            }
        }
        let last = steps[steps.len() - 1].offset_s;
        let duration_s = match duration_s {
            Some(d) => d,
            None if steps.len() == 1 => SINGLE_STEP_DURATION_S,
            None => 2.0 * last - steps[steps.len() - 2].offset_s,
        };
        if !(duration_s.is_finite() && duration_s > 0.0 && duration_s >= last) {
            return Err(format!("duration {duration_s} must be positive and >= last offset {last}"));
        }
        Ok(Self { steps, duration_s })
    }

    pub fn constant(users: u32, duration_s: f64) -> Self {
        Self::new(
            vec![TraceStep {
                offset_s: 0.0,
                user_count: users,
            }],
            Some(duration_s),
        )
        .expect("valid constant trace")
    }

    pub fn with_duration(self, duration_s: f64) -> Result<Self, String> {
        Self::new(self.steps, Some(duration_s))
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn max_users(&self) -> u32 {
        self.steps.iter().map(|s| s.user_count).max().unwrap_or(0)
    }

    pub fn users_at(&self, t_s: f64) -> u32 {
        if t_s >= self.duration_s {
            return 0;
        }
        let i = self.steps.partition_point(|s| s.offset_s <= t_s);
        if i == 0 {
            0
        } else {
            self.steps[i - 1].user_count
        }
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<LoadTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, path)
}

/// Parses `offset_s,user_count` CSV text. Row numbers in errors count data
/// rows from 1.
pub fn parse_trace(text: &str, path: &Path) -> Result<LoadTrace> {
    let err = |row: usize, message: String| Error::Trace {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.trim_start_matches('\u{feff}').as_bytes());
    let header = reader.headers().map_err(|e| err(0, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(err(0, format!("header must be {}", TRACE_HEADER.join(","))));
    }
    let mut steps = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| err(row, e.to_string()))?;
        if rec.len() != 2 {
            return Err(err(row, format!("expected 2 columns, got {}", rec.len())));
        }
        let offset_s: f64 = rec[0]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err(row, format!("bad offset {:?}", &rec[0])))?;
        let users: i64 = rec[1]
            .parse()
            .map_err(|_| err(row, format!("bad user count {:?}", &rec[1])))?;
        if users < 0 {
            return Err(err(row, format!("negative user count {users}")));
        }
        let user_count = u32::try_from(users).map_err(|_| err(row, format!("user count {users} too large")))?;
        if let Some(prev) = steps.last().map(|s: &TraceStep| s.offset_s) {
            if offset_s <= prev {
                return Err(err(row, format!("offset {offset_s} not after {prev}")));
            }
        } else if offset_s != 0.0 {
            return Err(err(row, format!("first offset must be 0, got {offset_s}")));
        }
        steps.push(TraceStep { offset_s, user_count });
    }
    if steps.is_empty() {
        return Err(err(0, "trace has no rows".into()));
    }
    LoadTrace::new(steps, None).map_err(|m| err(0, m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum UserModel {
    ClosedLoop {
        #[serde(default = "default_think")]
        think_time_s: f64,
    },
    OpenLoop {
        rate_per_user: f64,
    },
}

fn default_think() -> f64 {
    1.0
}

impl Default for UserModel {
    fn default() -> Self {
        UserModel::ClosedLoop {
            think_time_s: default_think(),
        }
    }
}

impl UserModel {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            UserModel::ClosedLoop { think_time_s } if !(think_time_s > 0.0 && think_time_s.is_finite()) => {
                Err(format!("think_time_s must be > 0, got {think_time_s}"))
            }
            UserModel::OpenLoop { rate_per_user } if !(rate_per_user >= 0.0 && rate_per_user.is_finite()) => {
                Err(format!("rate_per_user must be >= 0, got {rate_per_user}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionSummary {
    pub requests: u64,
    pub successes: u64,
    pub timeouts: u64,
    pub drops: u64,
    pub horizon_s: f64,
    pub scrapes: u64,
    pub ticks: u64,
}

const KIND_SHIFT: u32 = 60;
const METRONOME: u64 = 1;
const TRACE_STEP: u64 = 2;
const USER_WAKE: u64 = 3;
const OPEN_ARRIVAL: u64 = 4;

fn token(kind: u64, user: u64, generation: u32) -> u64 {
    debug_assert!(user < 1 << 28);
    (kind << KIND_SHIFT) | (user << 32) | generation as u64
}

fn decode(token: u64) -> (u64, usize, u32) {
    (
        token >> KIND_SHIFT,
        ((token >> 32) & ((1 << 28) - 1)) as usize,
        token as u32,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UserState {
    Idle,
    Thinking,
    InFlight { retiring: bool },
}

#[derive(Debug, Clone, Copy)]
struct User {
    state: UserState,
    generation: u32,
}

impl User {
    fn is_active(&self) -> bool {
        matches!(
            self.state,
            UserState::Thinking | UserState::InFlight { retiring: false }
        )
    }
}

struct Injector {
    model: UserModel,
    users: Vec<User>,
    active: u32,
    in_flight: HashMap<RequestId, usize>,
    open_generation: u32,
    open_rate: f64,
}

impl Injector {
    fn new(model: UserModel) -> Self {
        Self {
            model,
            users: Vec::new(),
            active: 0,
            in_flight: HashMap::new(),
            open_generation: 0,
            open_rate: 0.0,
        }
    }

    fn set_users(&mut self, sim: &mut Simulation, target: u32) {
        let now = sim.clock();
        match self.model {
            UserModel::OpenLoop { rate_per_user } => {
                self.active = target;
                self.open_generation = self.open_generation.wrapping_add(1);
                self.open_rate = rate_per_user * target as f64;
                self.schedule_open(sim, now);
            }
            UserModel::ClosedLoop { think_time_s } => {
                let mut i = 0;
                while self.active < target {
                    if i == self.users.len() {
                        self.users.push(User {
                            state: UserState::Idle,
                            generation: 0,
                        });
                    }
                    let u = &mut self.users[i];
                    match u.state {
                        UserState::InFlight { retiring: true } => {
                            u.state = UserState::InFlight { retiring: false };
                            self.active += 1;
                        }
                        UserState::Idle => {
                            u.state = UserState::Thinking;
                            self.active += 1;
                            let g = u.generation;
                            let wake = now + SimTime::from_secs(sim.rng_mut().exponential(1.0 / think_time_s));
                            sim.schedule_external(wake, token(USER_WAKE, i as u64, g));
                        }
                        _ => {}
                    }
                    i += 1;
                }
                let mut i = self.users.len();
                while self.active > target {
                    i -= 1;
                    let u = &mut self.users[i];
                    match u.state {
                        UserState::Thinking => {
                            u.state = UserState::Idle;
                            u.generation = u.generation.wrapping_add(1);
                            self.active -= 1;
                        }
                        UserState::InFlight { retiring: false } => {
                            u.state = UserState::InFlight { retiring: true };
                            self.active -= 1;
                        }
                        _ => {}
                    }
                }
                debug_assert_eq!(self.users.iter().filter(|u| u.is_active()).count(), target as usize);
            }
        }
    }

    fn schedule_open(&mut self, sim: &mut Simulation, from: SimTime) {
        if self.open_rate > 0.0 {
            let gap = sim.rng_mut().exponential(self.open_rate);
            sim.schedule_external(from + SimTime::from_secs(gap), token(OPEN_ARRIVAL, 0, self.open_generation));
        }
    }

    fn on_user_wake(&mut self, sim: &mut Simulation, user: usize, generation: u32) {
        let Some(u) = self.users.get_mut(user) else {
            return;
        };
        if u.generation != generation || u.state != UserState::Thinking {
            return;
        }
        u.state = UserState::InFlight { retiring: false };
        let id = sim.inject_request(sim.clock());
        self.in_flight.insert(id, user);
    }

    fn on_open_arrival(&mut self, sim: &mut Simulation, generation: u32) {
        if generation != self.open_generation {
            return;
        }
        let now = sim.clock();
        sim.inject_request(now);
        self.schedule_open(sim, now);
    }

    fn on_completion(&mut self, sim: &mut Simulation, record: &RequestRecord) {
        let UserModel::ClosedLoop { think_time_s } = self.model else {
            return;
        };
        let Some(user) = self.in_flight.remove(&record.id) else {
            return;
        };
        let u = &mut self.users[user];
        match u.state {
            UserState::InFlight { retiring: true } => u.state = UserState::Idle,
            UserState::InFlight { retiring: false } => {
                u.state = UserState::Thinking;
                let g = u.generation;
                let wake = sim.clock() + SimTime::from_secs(sim.rng_mut().exponential(1.0 / think_time_s));
                sim.schedule_external(wake, token(USER_WAKE, user as u64, g));
            }
            _ => {}
        }
    }
}

fn users_gauge(n: u32) -> [(&'static str, Labels, f64); 1] {
    [(LOCUST_USERS, Labels::new(), n as f64)]
}

/// Replays `trace` against a fresh simulation while scraping metrics every
/// scrape interval and running the scaler's control loop, then cancels the
/// scaler at the horizon. Completed requests are appended to `records`.
///
/// The scaler must already be registered. A scrape at t=0 is taken first if
/// the store is empty. Ticks fire at multiples of the control interval
/// strictly before the horizon; scrapes run up to and including it. When a
/// scrape and a tick coincide the scrape happens first.
pub fn run_injection(
    sim: &mut Simulation,
    trace: &LoadTrace,
    model: UserModel,
    store: &mut MetricStore,
    scaler: &mut ScalerHandle,
    records: &mut Vec<RequestRecord>,
) -> Result<InjectionSummary> {
    model.validate().map_err(|m| Error::Config(vec![m]))?;
    if sim.clock() != SimTime::ZERO {
        return Err(Error::Lifecycle("injection requires a fresh simulation".into()));
    }
    let horizon = SimTime::from_secs(trace.duration_s());
    let interval = SimTime::from_secs(store.scrape_interval_s());
    let mut summary = InjectionSummary {
        horizon_s: horizon.as_secs(),
        ..Default::default()
    };
    if store.scrape_times().is_empty() {
        store.scrape_with(sim, 0.0, &users_gauge(0))?;
        summary.scrapes += 1;
    }

    let mut injector = Injector::new(model);
    let injected_before = sim.counts().injected;
    let mut next_scrape = interval;
    let mut next_tick = scaler.next_tick_after(SimTime::ZERO);
    for (i, step) in trace.steps().iter().enumerate() {
        let t = SimTime::from_secs(step.offset_s);
        if t < horizon {
            sim.schedule_external(t, token(TRACE_STEP, i as u64, 0));
        }
    }
    let first = next_scrape.min(next_tick);
    if first <= horizon {
        sim.schedule_external(first, token(METRONOME, 0, 0));
    }

    while let Some(occ) = sim.step(horizon) {
        match occ {
            Occurrence::Completed(r) => {
                injector.on_completion(sim, &r);
                match r.outcome {
                    Outcome::Success => summary.successes += 1,
                    Outcome::Timeout => summary.timeouts += 1,
                    Outcome::Dropped => summary.drops += 1,
                }
                records.push(r);
            }
            Occurrence::External { time, token: tok } => {
                let (kind, idx, generation) = decode(tok);
                match kind {
                    TRACE_STEP => injector.set_users(sim, trace.steps()[idx].user_count),
                    USER_WAKE => injector.on_user_wake(sim, idx, generation),
                    OPEN_ARRIVAL => injector.on_open_arrival(sim, generation),
                    METRONOME => {
                        if time == next_scrape {
                            store.scrape_with(sim, time.as_secs(), &users_gauge(injector.active))?;
                            summary.scrapes += 1;
                            next_scrape = next_scrape + interval;
                        }
                        if time == next_tick {
                            if time < horizon {
                                scaler.drive_tick(store, sim)?;
                                summary.ticks += 1;
                            }
                            next_tick = next_tick + scaler.control_interval();
                        }
                        let next = next_scrape.min(next_tick);
                        if next <= horizon {
                            sim.schedule_external(next, token(METRONOME, 0, 0));
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    scaler.cancel(horizon)?;
    summary.requests = sim.counts().injected - injected_before;
    Ok(summary)
}

/// Lets in-flight requests finish for `drain_s` after the horizon with no new
/// load and no scaler, scraping on schedule. Pending user wake-ups are
/// ignored. Returns the number of requests completed during the drain.
pub fn run_drain(
    sim: &mut Simulation,
    store: &mut MetricStore,
    drain_s: f64,
    records: &mut Vec<RequestRecord>,
) -> Result<u64> {
    let interval = SimTime::from_secs(store.scrape_interval_s());
    let end = sim.clock() + SimTime::from_secs(drain_s);
    let mut next_scrape = store
        .scrape_times()
        .last()
        .map_or(SimTime::ZERO, |&t| t + interval);
    let mut completed = 0;
    loop {
        let until = next_scrape.min(end);
        while let Some(occ) = sim.step(until) {
            if let Occurrence::Completed(r) = occ {
                records.push(r);
                completed += 1;
            }
        }
        if until == next_scrape {
            store.scrape_with(sim, next_scrape.as_secs(), &users_gauge(0))?;
            next_scrape = next_scrape + interval;
        }
        if until == end {
            break;
        }
    }
    Ok(completed)
}
