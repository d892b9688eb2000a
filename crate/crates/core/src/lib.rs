//! Deterministic simulation testbed for microservice auto-scalers.
//!
//! One experiment runs the full evaluation lifecycle against a simulated
//! benchmark: reset the benchmark, register a scaler, replay a user-count
//! trace against it while the scaler's control loop runs, collect
//! Prometheus-style metrics at a fixed interval, and compute SLA violation
//! rate, success rate and resource totals.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod rng;
pub mod scaler;
pub mod scalers;
pub mod sim;
pub mod telemetry;
pub mod time;
pub mod topology;
pub mod workload;

pub use benchmark::{load_benchmark, reset_benchmark, Benchmark};
pub use error::{Error, Result};
pub use scaler::{Executor, Monitor, Scaler, ScalerHandle};
pub use sim::{build_simulation, Outcome, RequestRecord, SimConfig, Simulation};
pub use telemetry::MetricStore;
pub use time::SimTime;
pub use topology::{CallEdge, ServiceSpec, ServiceTopology};
pub use workload::{load_trace, LoadTrace, UserModel};
pub use experiment::{run_comparison, run_experiment, validate_config, Experiment, ExperimentConfig};
pub use evaluate::{compute_sr, compute_svr, EvaluationReport};
