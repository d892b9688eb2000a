use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use scalebench::evaluate;
use scalebench::experiment::{self, Overrides};
use scalebench::scalers::{self, KhpaConfig};
use scalebench::sim::{self, Outcome, RequestRecord};
use scalebench::{SimTime, ServiceTopology};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A validated service call graph.
#[pyclass(name = "Topology", module = "scalebench", frozen)]
struct Topology {
    inner: ServiceTopology,
}

#[pymethods]
impl Topology {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ServiceTopology::from_json_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_path(path: PathBuf) -> PyResult<Self> {
        let inner = ServiceTopology::from_path(&path).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Single-service M/M/c topology.
    #[staticmethod]
    fn single(name: &str, replicas: u32, mu: f64) -> Self {
        Self {
            inner: ServiceTopology::single(name, replicas, mu),
        }
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn entry_service(&self) -> &str {
        &self.inner.entry_service
    }

    #[getter]
    fn services(&self) -> Vec<String> {
        self.inner.services.iter().map(|s| s.name.clone()).collect()
    }

    /// Expected visits to each service per entry request.
    fn visit_ratios(&self) -> Vec<(String, f64)> {
        self.inner
            .services
            .iter()
            .zip(self.inner.visit_ratios())
            .map(|(s, v)| (s.name.clone(), v))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Topology({:?}, {} services)", self.inner.name, self.inner.services.len())
    }
}

/// Direct handle on the discrete-event engine.
#[pyclass(name = "Simulation", module = "scalebench")]
struct Simulation {
    inner: sim::Simulation,
}

fn record_tuple(r: &RequestRecord) -> (u64, f64, f64, &'static str) {
    (r.id, r.arrival_time_s(), r.completion_time_s(), r.outcome.as_str())
}

#[pymethods]
impl Simulation {
    #[new]
    fn new(topology: &Topology, seed: u64) -> PyResult<Self> {
        let inner = sim::build_simulation(&topology.inner, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn clock_s(&self) -> f64 {
        self.inner.clock().as_secs()
    }

    /// Injects one entry request arriving at `t_s`; returns its id.
    fn inject(&mut self, t_s: f64) -> PyResult<u64> {
        if t_s < self.inner.clock().as_secs() {
            return Err(err(format!("arrival {t_s} s is before the clock")));
        }
        Ok(self.inner.inject_request_at(t_s))
    }

    /// Runs to `t_s` and returns `(id, arrival_s, completion_s, outcome)` for
    /// every request resolved on the way.
    fn advance(&mut self, t_s: f64) -> Vec<(u64, f64, f64, &'static str)> {
        self.inner.advance_to_secs(t_s).iter().map(record_tuple).collect()
    }

    fn set_replicas(&mut self, service: &str, target: u32) -> PyResult<u32> {
        self.inner.set_replicas(service, target).map_err(err)
    }

    fn ready_replicas(&self, service: &str) -> PyResult<u32> {
        let i = self
            .inner
            .topology()
            .service_index(service)
            .ok_or_else(|| err(format!("unknown service {service:?}")))?;
        Ok(self.inner.ready_replicas(i))
    }

    fn in_system(&self) -> u64 {
        self.inner.in_system()
    }

    fn in_system_area_s(&self) -> f64 {
        self.inner.in_system_area_secs()
    }
}

fn to_records(records: Vec<(f64, f64, String)>) -> PyResult<Vec<RequestRecord>> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, (a, c, o))| {
            let outcome = Outcome::parse(&o).ok_or_else(|| err(format!("unknown outcome {o:?}")))?;
            Ok(RequestRecord {
                id: i as u64,
                arrival: SimTime::from_secs(a),
                completion: SimTime::from_secs(c),
                outcome,
            })
        })
        .collect()
}

#[pyfunction]
#[pyo3(signature = (current, utilization, threshold=0.5, tolerance=0.1))]
fn khpa_desired(current: u32, utilization: f64, threshold: f64, tolerance: f64) -> PyResult<u32> {
    let cfg = KhpaConfig {
        tolerance,
        ..KhpaConfig::with_threshold(threshold)
    };
    cfg.validate().map_err(err)?;
    Ok(scalers::khpa_desired(current, utilization, &cfg))
}

/// Least-squares extrapolation of `(t_s, rate)` samples `horizon_s` ahead.
#[pyfunction]
fn forecast_rate(history: Vec<(f64, f64)>, horizon_s: f64) -> Option<f64> {
    scalers::forecast_rate(&history, horizon_s)
}

#[pyfunction]
fn replicas_for_rate(rate: f64, capacity: f64, headroom: f64, lo: u32, hi: u32) -> u32 {
    scalers::replicas_for_rate(rate, capacity, headroom, lo, hi)
}

/// `records` are `(arrival_s, completion_s, outcome)` tuples.
#[pyfunction]
fn compute_svr(records: Vec<(f64, f64, String)>, sla_ms: f64) -> PyResult<f64> {
    evaluate::compute_svr(&to_records(records)?, sla_ms).map_err(err)
}

#[pyfunction]
fn compute_sr(records: Vec<(f64, f64, String)>) -> PyResult<f64> {
    evaluate::compute_sr(&to_records(records)?).map_err(err)
}

/// Returns the trace as `(offset_s, user_count)` steps plus its duration.
#[pyfunction]
fn load_trace(path: PathBuf) -> PyResult<(Vec<(f64, u32)>, f64)> {
    let t = scalebench::load_trace(&path).map_err(err)?;
    Ok((t.steps().iter().map(|s| (s.offset_s, s.user_count)).collect(), t.duration_s()))
}

/// Resolves a config file and returns `{"config": ..., "defaults_applied": [...]}`.
#[pyfunction]
#[pyo3(signature = (path, seed=None, output_dir=None))]
fn validate_config<'py>(
    py: Python<'py>,
    path: PathBuf,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let exp = experiment::validate_config_with(&path, &Overrides { seed, output_dir }).map_err(err)?;
    json_to_py(
        py,
        &serde_json::json!({"config": exp.config, "defaults_applied": exp.defaults_applied}),
    )
}

/// Runs a single-scaler config and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (path, seed=None, output_dir=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    path: PathBuf,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let exp = experiment::validate_config_with(&path, &Overrides { seed, output_dir }).map_err(err)?;
    let result = py.detach(|| experiment::run_experiment(&exp)).map_err(err)?;
    json_to_py(py, &result.report)
}

#[pymodule(name = "scalebench")]
fn scalebench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Topology>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(khpa_desired, m)?)?;
    m.add_function(wrap_pyfunction!(forecast_rate, m)?)?;
    m.add_function(wrap_pyfunction!(replicas_for_rate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_svr, m)?)?;
    m.add_function(wrap_pyfunction!(compute_sr, m)?)?;
    m.add_function(wrap_pyfunction!(load_trace, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
