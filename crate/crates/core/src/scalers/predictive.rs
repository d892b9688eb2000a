use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::scaler::{Executor, Monitor, Scaler, ScalerError};
use crate::topology::ServiceTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictiveConfig {
    pub history_window_s: f64,
    pub horizon_s: f64,
    /// Window of each entry-rate observation.
    pub rate_window_s: f64,
    /// Target utilization per replica, in (0, 1).
    pub headroom: f64,
    /// Use `service_rate_mu` from the topology as the per-replica capacity.
    /// When false, capacity is estimated from observed requests per CPU
    /// second.
    pub white_box: bool,
    /// Explicit per-replica capacity per service, overriding both sources.
    pub capacity: BTreeMap<String, f64>,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        Self {
            history_window_s: 120.0,
            horizon_s: 30.0,
            rate_window_s: 30.0,
            headroom: 0.6,
            white_box: true,
            capacity: BTreeMap::new(),
        }
    }
}

impl PredictiveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.headroom > 0.0 && self.headroom < 1.0) {
            return Err(format!("headroom must be in (0, 1), got {}", self.headroom));
        }
        if !(self.horizon_s > 0.0 && self.history_window_s > 0.0 && self.rate_window_s > 0.0) {
            return Err("windows and horizon must be positive".into());
        }
        if let Some((k, v)) = self.capacity.iter().find(|(_, v)| !(**v > 0.0)) {
            return Err(format!("capacity for {k} must be > 0, got {v}"));
        }
        Ok(())
    }
}

/// Least-squares line through `(t, rate)` points, evaluated `horizon_s`
/// after the last point and floored at zero. Needs two distinct times.
pub fn forecast_rate(history: &[(f64, f64)], horizon_s: f64) -> Option<f64> {
    if history.len() < 2 {
        return None;
    }
    let n = history.len() as f64;
    let mt = history.iter().map(|p| p.0).sum::<f64>() / n;
    let mr = history.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = history.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = history.iter().map(|p| (p.0 - mt) * (p.1 - mr)).sum();
    let slope = sxy / sxx;
    let t = history[history.len() - 1].0 + horizon_s;
    Some((mr + slope * (t - mt)).max(0.0))
}

/// `ceil(rate / (capacity * headroom))` clamped to `[lo, hi]`.
pub fn replicas_for_rate(rate: f64, capacity: f64, headroom: f64, lo: u32, hi: u32) -> u32 {
    let need = (rate / (capacity * headroom)).ceil();
    if need.is_nan() {
        return lo;
    }
    (need.clamp(0.0, u32::MAX as f64) as u32).clamp(lo, hi)
}

/// Desired replicas per service (topology order) from the entry-rate
/// history, or `None` with fewer than two history points.
pub fn predictive_desired(
    history: &[(f64, f64)],
    cfg: &PredictiveConfig,
    topology: &ServiceTopology,
    capacity: &[f64],
) -> Option<Vec<u32>> {
    let entry_rate = forecast_rate(history, cfg.horizon_s)?;
    let visits = topology.visit_ratios();
    Some(
        topology
            .services
            .iter()
            .zip(visits)
            .zip(capacity)
            .map(|((spec, v), &mu)| {
                replicas_for_rate(entry_rate * v, mu, cfg.headroom, spec.min_replicas, spec.max_replicas)
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Predictive {
    cfg: PredictiveConfig,
    topology: Option<ServiceTopology>,
    history: VecDeque<(f64, f64)>,
    capacity: Vec<f64>,
}

impl Predictive {
    pub fn new(cfg: PredictiveConfig) -> Self {
        Self {
            cfg,
            topology: None,
            history: VecDeque::new(),
            capacity: Vec::new(),
        }
    }

    fn refresh_capacity(&mut self, monitor: &Monitor<'_>, topology: &ServiceTopology) -> Result<(), ScalerError> {
        for (i, spec) in topology.services.iter().enumerate() {
            if self.cfg.capacity.contains_key(&spec.name) || self.cfg.white_box {
                continue;
            }
            let w = self.cfg.rate_window_s;
            if let (Some(req), Some(cpu)) = (monitor.request_rate(&spec.name, w)?, monitor.cpu_rate(&spec.name, w)?) {
                if req > 0.0 && cpu > 0.0 {
                    self.capacity[i] = req / cpu;
                }
            }
        }
        Ok(())
    }
}

impl Scaler for Predictive {
    fn register(
        &mut self,
        _: &Monitor<'_>,
        _: &mut Executor<'_>,
        topology: &ServiceTopology,
    ) -> Result<(), ScalerError> {
        for name in self.cfg.capacity.keys() {
            if topology.service(name).is_none() {
                return Err(format!("capacity given for unknown service {name}").into());
            }
        }
        self.capacity = topology
            .services
            .iter()
            .map(|s| self.cfg.capacity.get(&s.name).copied().unwrap_or(s.service_rate_mu))
            .collect();
        self.topology = Some(topology.clone());
        Ok(())
    }

    fn scale(&mut self, monitor: &Monitor<'_>, executor: &mut Executor<'_>) -> Result<(), ScalerError> {
        let topology = self.topology.clone().ok_or("scale before register")?;
        let now = monitor.as_of_s();
        if let Some(rate) = monitor.request_rate(monitor.entry_service(), self.cfg.rate_window_s)? {
            self.history.push_back((now, rate));
        }
        while self
            .history
            .front()
            .is_some_and(|&(t, _)| t < now - self.cfg.history_window_s)
        {
            self.history.pop_front();
        }
        self.refresh_capacity(monitor, &topology)?;
        let history: Vec<(f64, f64)> = self.history.iter().copied().collect();
        let Some(desired) = predictive_desired(&history, &self.cfg, &topology, &self.capacity) else {
            return Ok(());
        };
        for (spec, want) in topology.services.iter().zip(desired) {
            if executor.target_replicas(&spec.name)? != want {
                executor.set_replicas(&spec.name, want)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_history() {
        let h: Vec<_> = (0..5).map(|i| (i as f64 * 15.0, 10.0)).collect();
        let r = forecast_rate(&h, 30.0).unwrap();
        assert!((r - 10.0).abs() < 1e-12);
        assert_eq!(replicas_for_rate(r, 2.0, 0.5, 1, 50), 10);
    }

    #[test]
    fn ramp_extrapolates() {
        let h: Vec<_> = (0..=10).map(|i| (i as f64 * 12.0, 5.0 + i as f64 * 0.5)).collect();
        let r = forecast_rate(&h, 120.0).unwrap();
        assert!((r - 15.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn zero_traffic_gives_floor() {
        let h = [(0.0, 0.0), (15.0, 0.0)];
        let r = forecast_rate(&h, 30.0).unwrap();
        assert_eq!(replicas_for_rate(r, 3.0, 0.6, 2, 10), 2);
    }

    #[test]
    fn falling_forecast_floored_at_zero() {
        let h = [(0.0, 10.0), (10.0, 0.0)];
        assert_eq!(forecast_rate(&h, 100.0), Some(0.0));
    }

    #[test]
    fn needs_two_points() {
        assert_eq!(forecast_rate(&[(0.0, 1.0)], 10.0), None);
        assert_eq!(forecast_rate(&[(5.0, 1.0), (5.0, 2.0)], 10.0), None);
    }

    #[test]
    fn per_service_rates_follow_visit_ratios() {
        let topo = ServiceTopology::from_json_str(
            r#"{"name": "t", "entry_service": "a",
                "services": [
                    {"name": "a", "initial_replicas": 1, "service_rate_mu": 10},
                    {"name": "b", "initial_replicas": 1, "service_rate_mu": 10}],
                "edges": [{"caller": "a", "callee": "b", "calls_per_request": 2}]}"#,
        )
        .unwrap();
        let cfg = PredictiveConfig {
            headroom: 0.5,
            ..PredictiveConfig::default()
        };
        let h = [(0.0, 20.0), (15.0, 20.0)];
        assert_eq!(predictive_desired(&h, &cfg, &topo, &[10.0, 10.0]), Some(vec![4, 8]));
    }
}
