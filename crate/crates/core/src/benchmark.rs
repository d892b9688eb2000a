//! Benchmark manifests: which topology to run, how traffic enters it, and
//! per-service parameter overrides. Also the reset that starts every
//! experiment from a clean slate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{SimConfig, Simulation};
use crate::telemetry::MetricStore;
use crate::topology::ServiceTopology;

/// Ingress routing for the benchmark. Only recorded in run metadata: the
/// simulated system has a single entry service, so routing has no effect on
/// behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficRoute {
    #[serde(default = "default_route")]
    pub entry_route: String,
    #[serde(default)]
    pub gateway_label: String,
}

fn default_route() -> String {
    "/".to_string()
}

impl Default for TrafficRoute {
    fn default() -> Self {
        Self {
            entry_route: default_route(),
            gateway_label: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceOverride {
    pub initial_replicas: Option<u32>,
    pub service_rate_mu: Option<f64>,
    pub cpu_demand: Option<f64>,
    pub base_memory_mb: Option<f64>,
    pub memory_per_utilization_mb: Option<f64>,
    pub queue_capacity: Option<u32>,
    pub min_replicas: Option<u32>,
    pub max_replicas: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    /// Topology file, relative to the manifest.
    pub topology: PathBuf,
    #[serde(default)]
    pub traffic: TrafficRoute,
    #[serde(default)]
    pub overrides: BTreeMap<String, ServiceOverride>,
}

/// A loaded, validated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Benchmark {
    pub manifest_path: PathBuf,
    pub topology_path: PathBuf,
    pub traffic: TrafficRoute,
    pub topology: ServiceTopology,
}

pub fn load_benchmark(manifest_path: impl AsRef<Path>) -> Result<Benchmark> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: BenchmarkManifest = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let topology_path = base.join(&manifest.topology);
    let text = std::fs::read_to_string(&topology_path).map_err(|e| Error::io(&topology_path, e))?;
    let mut topology: ServiceTopology =
        serde_json::from_str(&text).map_err(|e| Error::parse(&topology_path, e))?;

    for (service, ov) in &manifest.overrides {
        let spec = topology
            .services
            .iter_mut()
            .find(|s| &s.name == service)
            .ok_or_else(|| Error::UnknownOverride {
                path: path.to_path_buf(),
                service: service.clone(),
            })?;
        apply_override(spec, ov);
    }
    topology.validate().map_err(|source| Error::Topology {
        path: Some(path.to_path_buf()),
        source,
    })?;

    Ok(Benchmark {
        manifest_path: path.to_path_buf(),
        topology_path,
        traffic: manifest.traffic,
        topology,
    })
}

fn apply_override(spec: &mut crate::topology::ServiceSpec, ov: &ServiceOverride) {
    if let Some(v) = ov.initial_replicas {
        spec.initial_replicas = v;
    }
    if let Some(v) = ov.service_rate_mu {
        spec.service_rate_mu = v;
    }
    if let Some(v) = ov.cpu_demand {
        spec.cpu_demand = Some(v);
    }
    if let Some(v) = ov.base_memory_mb {
        spec.base_memory_mb = v;
    }
    if let Some(v) = ov.memory_per_utilization_mb {
        spec.memory_per_utilization_mb = v;
    }
    if let Some(v) = ov.queue_capacity {
        spec.queue_capacity = v;
    }
    if let Some(v) = ov.min_replicas {
        spec.min_replicas = v;
    }
    if let Some(v) = ov.max_replicas {
        spec.max_replicas = v;
    }
}

/// Files a run writes into its output directory.
pub const RUN_ARTIFACTS: [&str; 5] = [
    "requests.csv",
    "metrics.csv",
    "actions.csv",
    "report.json",
    "run-meta.json",
];

/// Removes artifacts left in `dir` by an earlier run. Only known artifact
/// names are touched.
pub fn clear_run_outputs(dir: &Path) -> Result<()> {
    for name in RUN_ARTIFACTS {
        remove_if_present(&dir.join(name))?;
    }
    let plots = dir.join("plots");
    if plots.is_dir() {
        for entry in std::fs::read_dir(&plots).map_err(|e| Error::io(&plots, e))? {
            let p = entry.map_err(|e| Error::io(&plots, e))?.path();
            if p.extension().is_some_and(|x| x == "csv") {
                remove_if_present(&p)?;
            }
        }
    }
    Ok(())
}

fn remove_if_present(p: &Path) -> Result<()> {
    match std::fs::remove_file(p) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(p, e)),
    }
}

/// Builds a fresh simulation for the topology and wipes the metric store and
/// any staged outputs bound to the run, so nothing carries over from an
/// earlier experiment except the explicit seed and configuration.
pub fn reset_benchmark(
    topology: &ServiceTopology,
    seed: u64,
    config: SimConfig,
    store: &mut MetricStore,
    staging: Option<&Path>,
) -> Result<Simulation> {
    store.clear();
    if let Some(dir) = staging {
        clear_run_outputs(dir)?;
    }
    Simulation::new(topology.clone(), seed, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    const TOPO: &str = r#"{
        "name": "tiny",
        "services": [
            {"name": "frontend", "initial_replicas": 1, "service_rate_mu": 50},
            {"name": "db", "initial_replicas": 1, "service_rate_mu": 100}
        ],
        "edges": [{"caller": "frontend", "callee": "db", "calls_per_request": 1}],
        "entry_service": "frontend",
        "sla_ms": 500,
        "timeout_ms": 10000
    }"#;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn override_applied() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "topo.json", TOPO);
        let m = write(
            d.path(),
            "manifest.json",
            r#"{"topology": "topo.json", "traffic": {"entry_route": "/", "gateway_label": "gw"},
                "overrides": {"frontend": {"initial_replicas": 2}}}"#,
        );
        let b = load_benchmark(&m).unwrap();
        assert_eq!(b.topology.service("frontend").unwrap().initial_replicas, 2);
        assert_eq!(b.traffic.gateway_label, "gw");
    }

    #[test]
    fn unknown_override_target() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "topo.json", TOPO);
        let m = write(
            d.path(),
            "manifest.json",
            r#"{"topology": "topo.json", "overrides": {"cache": {"initial_replicas": 2}}}"#,
        );
        let err = load_benchmark(&m).unwrap_err();
        assert!(matches!(err, Error::UnknownOverride { ref service, .. } if service == "cache"));
        assert!(err.to_string().contains("manifest.json"));
    }

    #[test]
    fn malformed_json_has_position() {
        let d = tempfile::tempdir().unwrap();
        let m = write(d.path(), "manifest.json", "{\n  \"topology\": \"t.json\",,\n}");
        match load_benchmark(&m).unwrap_err() {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_manifest_key_rejected() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "topo.json", TOPO);
        let m = write(d.path(), "manifest.json", r#"{"topology": "topo.json", "replicas": 3}"#);
        assert!(matches!(load_benchmark(&m).unwrap_err(), Error::Parse { .. }));
    }

    #[test]
    fn override_breaking_bounds_fails_validation() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "topo.json", TOPO);
        let m = write(
            d.path(),
            "manifest.json",
            r#"{"topology": "topo.json", "overrides": {"db": {"initial_replicas": 0}}}"#,
        );
        assert!(matches!(load_benchmark(&m).unwrap_err(), Error::Topology { .. }));
    }

    #[test]
    fn reset_is_idempotent_and_clears() {
        let topo = ServiceTopology::from_json_str(TOPO).unwrap();
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "metrics.csv", "stale");
        write(d.path(), "notes.txt", "keep me");
        let mut store = MetricStore::new(5.0);
        let mut sim = reset_benchmark(&topo, 3, SimConfig::default(), &mut store, Some(d.path())).unwrap();
        store.scrape(&sim, 0.0).unwrap();
        sim.inject_request_at(0.5);
        sim.advance_to_secs(5.0);
        store.scrape(&sim, 5.0).unwrap();

        let a = reset_benchmark(&topo, 3, SimConfig::default(), &mut store, Some(d.path())).unwrap();
        assert!(store.is_empty());
        assert!(!d.path().join("metrics.csv").exists());
        assert!(d.path().join("notes.txt").exists());
        let b = reset_benchmark(&topo, 3, SimConfig::default(), &mut store, Some(d.path())).unwrap();
        assert_eq!(a.clock(), b.clock());
        assert_eq!(a.snapshot_resources(), b.snapshot_resources());
        assert_eq!(a.counts(), b.counts());
        assert_eq!(a.ready_replicas(0), 1);
    }
}
