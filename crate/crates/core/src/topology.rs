//! Benchmark call graphs: services, call edges, and their validation.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SLA_MS: f64 = 500.0;
pub const DEFAULT_TIMEOUT_MS: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("duplicate service {0}")]
    DuplicateService(String),
    #[error("unknown entry service {0}")]
    UnknownEntry(String),
    #[error("unknown caller {0}")]
    UnknownCaller(String),
    #[error("unknown callee {0}")]
    UnknownCallee(String),
    #[error("self call on service {0}")]
    SelfCall(String),
    #[error("call graph has a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("service {service}: {field} {reason}")]
    InvalidParameter {
        service: String,
        field: &'static str,
        reason: String,
    },
    #[error("edge {caller} -> {callee}: calls_per_request must be finite and >= 0")]
    InvalidCallRate { caller: String, callee: String },
    #[error("topology has no services")]
    Empty,
    #[error("sla_ms must be > 0 and timeout_ms > sla_ms (got sla {sla_ms}, timeout {timeout_ms})")]
    InvalidDeadlines { sla_ms: f64, timeout_ms: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTimeDistribution {
    #[default]
    Exponential,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub initial_replicas: u32,
    /// Requests per second one replica completes.
    pub service_rate_mu: f64,
    /// Core-seconds per request; defaults to `1 / service_rate_mu`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_demand: Option<f64>,
    #[serde(default = "default_base_memory")]
    pub base_memory_mb: f64,
    #[serde(default)]
    pub memory_per_utilization_mb: f64,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: u32,
    #[serde(default = "default_min_replicas")]
    pub min_replicas: u32,
    #[serde(default = "default_max_replicas")]
    pub max_replicas: u32,
}

fn default_base_memory() -> f64 {
    100.0
}
fn default_queue_capacity() -> u32 {
    1000
}
fn default_min_replicas() -> u32 {
    1
}
fn default_max_replicas() -> u32 {
    50
}

impl ServiceSpec {
    pub fn new(name: impl Into<String>, initial_replicas: u32, service_rate_mu: f64) -> Self {
        Self {
            name: name.into(),
            initial_replicas,
            service_rate_mu,
            cpu_demand: None,
            base_memory_mb: default_base_memory(),
            memory_per_utilization_mb: 0.0,
            queue_capacity: default_queue_capacity(),
            min_replicas: default_min_replicas(),
            max_replicas: default_max_replicas().max(initial_replicas),
        }
    }

    pub fn cpu_demand(&self) -> f64 {
        self.cpu_demand.unwrap_or(1.0 / self.service_rate_mu)
    }

    /// Cores one busy replica consumes.
    pub fn cores_per_busy_replica(&self) -> f64 {
        self.cpu_demand() * self.service_rate_mu
    }

    pub fn clamp_replicas(&self, target: u32) -> u32 {
        target.clamp(self.min_replicas, self.max_replicas)
    }

    fn validate(&self) -> Result<(), TopologyError> {
        let bad = |field: &'static str, reason: String| TopologyError::InvalidParameter {
            service: self.name.clone(),
            field,
            reason,
        };
        if !(self.service_rate_mu > 0.0 && self.service_rate_mu.is_finite()) {
            return Err(bad("service_rate_mu", format!("must be > 0, got {}", self.service_rate_mu)));
        }
        if let Some(d) = self.cpu_demand {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(bad("cpu_demand", format!("must be >= 0, got {d}")));
            }
        }
        if self.min_replicas < 1 {
            return Err(bad("min_replicas", "must be >= 1".into()));
        }
        if self.max_replicas < self.min_replicas {
            return Err(bad(
                "max_replicas",
                format!("{} is below min_replicas {}", self.max_replicas, self.min_replicas),
            ));
        }
        if self.initial_replicas < self.min_replicas || self.initial_replicas > self.max_replicas {
            return Err(bad(
                "initial_replicas",
                format!(
                    "{} outside [{}, {}]",
                    self.initial_replicas, self.min_replicas, self.max_replicas
                ),
            ));
        }
        for (field, v) in [
            ("base_memory_mb", self.base_memory_mb),
            ("memory_per_utilization_mb", self.memory_per_utilization_mb),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(field, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallEdge {
    pub caller: String,
    pub callee: String,
    /// Expected downstream calls per handled request. The integral part is
    /// issued deterministically and the fractional part is a Bernoulli draw.
    pub calls_per_request: f64,
}

impl CallEdge {
    pub fn new(caller: impl Into<String>, callee: impl Into<String>, calls_per_request: f64) -> Self {
        Self {
            caller: caller.into(),
            callee: callee.into(),
            calls_per_request,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceTopology {
    pub name: String,
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub edges: Vec<CallEdge>,
    pub entry_service: String,
    #[serde(default = "default_sla")]
    pub sla_ms: f64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: f64,
    #[serde(default)]
    pub service_time: ServiceTimeDistribution,
}

fn default_sla() -> f64 {
    DEFAULT_SLA_MS
}
fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_MS
}

impl ServiceTopology {
    /// Single-service topology, mostly useful for queueing checks.
    pub fn single(name: &str, replicas: u32, mu: f64) -> Self {
        Self {
            name: name.to_string(),
            services: vec![ServiceSpec::new(name, replicas, mu)],
            edges: Vec::new(),
            entry_service: name.to_string(),
            sla_ms: DEFAULT_SLA_MS,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            service_time: ServiceTimeDistribution::Exponential,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, crate::Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let topo = Self::from_json_str(&text).map_err(|e| crate::Error::parse(path, e))?;
        topo.validate().map_err(|e| crate::Error::Topology {
            path: Some(path.to_path_buf()),
            source: e,
        })?;
        Ok(topo)
    }

    pub fn service_index(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| s.name == name)
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn entry_index(&self) -> usize {
        self.service_index(&self.entry_service)
            .expect("validated topology has an entry service")
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.services.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut seen = HashMap::new();
        for (i, s) in self.services.iter().enumerate() {
            if seen.insert(s.name.as_str(), i).is_some() {
                return Err(TopologyError::DuplicateService(s.name.clone()));
            }
            s.validate()?;
        }
        if !seen.contains_key(self.entry_service.as_str()) {
            return Err(TopologyError::UnknownEntry(self.entry_service.clone()));
        }
        if !(self.sla_ms > 0.0 && self.timeout_ms > self.sla_ms && self.timeout_ms.is_finite()) {
            return Err(TopologyError::InvalidDeadlines {
                sla_ms: self.sla_ms,
                timeout_ms: self.timeout_ms,
            });
        }
        for e in &self.edges {
            if !seen.contains_key(e.caller.as_str()) {
                return Err(TopologyError::UnknownCaller(e.caller.clone()));
            }
            if !seen.contains_key(e.callee.as_str()) {
                return Err(TopologyError::UnknownCallee(e.callee.clone()));
            }
            if e.caller == e.callee {
                return Err(TopologyError::SelfCall(e.caller.clone()));
            }
            if !(e.calls_per_request >= 0.0 && e.calls_per_request.is_finite()) {
                return Err(TopologyError::InvalidCallRate {
                    caller: e.caller.clone(),
                    callee: e.callee.clone(),
                });
            }
        }
        if let Some(cycle) = self.find_cycle() {
            return Err(TopologyError::Cycle(cycle));
        }
        Ok(())
    }

    /// Downstream edges per service index, in declared order, as
    /// `(callee index, calls_per_request)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.services.len()];
        for e in &self.edges {
            if let (Some(a), Some(b)) = (self.service_index(&e.caller), self.service_index(&e.callee)) {
                adj[a].push((b, e.calls_per_request));
            }
        }
        adj
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let adj = self.adjacency();
        let mut mark = vec![Mark::New; self.services.len()];
        let mut path = Vec::new();

        fn visit(
            v: usize,
            adj: &[Vec<(usize, f64)>],
            mark: &mut [Mark],
            path: &mut Vec<usize>,
        ) -> Option<Vec<usize>> {
            mark[v] = Mark::Active;
            path.push(v);
            for &(w, _) in &adj[v] {
                match mark[w] {
                    Mark::Active => {
                        let start = path.iter().position(|&p| p == w).unwrap();
                        let mut cycle = path[start..].to_vec();
                        cycle.push(w);
                        return Some(cycle);
                    }
                    Mark::New => {
                        if let Some(c) = visit(w, adj, mark, path) {
                            return Some(c);
                        }
                    }
                    Mark::Done => {}
                }
            }
            path.pop();
            mark[v] = Mark::Done;
            None
        }

        for v in 0..self.services.len() {
            if mark[v] == Mark::New {
                if let Some(c) = visit(v, &adj, &mut mark, &mut path) {
                    return Some(c.into_iter().map(|i| self.services[i].name.clone()).collect());
                }
            }
        }
        None
    }

    /// Service indices in topological order (callers before callees), ties
    /// broken by declaration order.
    pub fn topological_order(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut indegree = vec![0usize; self.services.len()];
        for out in &adj {
            for &(w, _) in out {
                indegree[w] += 1;
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..self.services.len()).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(self.services.len());
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &(w, _) in &adj[v] {
                indegree[w] -= 1;
                if indegree[w] == 0 {
                    ready.insert(w);
                }
            }
        }
        order
    }

    /// Expected visits to each service per request entering at the entry
    /// service: the sum over call paths of the product of
    /// `calls_per_request` along the path.
    pub fn visit_ratios(&self) -> Vec<f64> {
        let adj = self.adjacency();
        let mut visits = vec![0.0; self.services.len()];
        visits[self.entry_index()] = 1.0;
        for v in self.topological_order() {
            let here = visits[v];
            for &(w, calls) in &adj[v] {
                visits[w] += here * calls;
            }
        }
        visits
    }

    /// Expected span duration of each service in an unloaded system: its own
    /// mean service time plus the expected spans of its downstream calls.
    pub fn unloaded_span_secs(&self) -> Vec<f64> {
        let adj = self.adjacency();
        let mut span = vec![0.0; self.services.len()];
        for v in self.topological_order().into_iter().rev() {
            span[v] = 1.0 / self.services[v].service_rate_mu
                + adj[v].iter().map(|&(w, calls)| calls * span[w]).sum::<f64>();
        }
        span
    }
}
