use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scaler::{Executor, Monitor, Scaler, ScalerError};
use crate::topology::ServiceTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    /// Tail latency target at the entry service. Other services get the
    /// same target scaled by their share of the unloaded end-to-end span.
    pub target_latency_ms: f64,
    pub quantile: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the absolute accumulated error.
    pub integral_limit: f64,
    pub latency_window_s: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            target_latency_ms: 400.0,
            quantile: 0.95,
            kp: 1.0,
            ki: 0.1,
            kd: 0.0,
            integral_limit: 10.0,
            latency_window_s: 30.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.target_latency_ms > 0.0) {
            return Err("target_latency_ms must be > 0".into());
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(format!("quantile must be in (0, 1), got {}", self.quantile));
        }
        if !(self.integral_limit >= 0.0) {
            return Err("integral_limit must be >= 0".into());
        }
        if ![self.kp, self.ki, self.kd].iter().all(|g| g.is_finite()) {
            return Err("gains must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

/// One controller step. `None` latency (no traffic in the window) leaves the
/// state untouched and proposes `current`.
pub fn pid_step(
    state: &mut PidState,
    observed_ms: Option<f64>,
    target_ms: f64,
    cfg: &PidConfig,
    current: u32,
    min_replicas: u32,
) -> u32 {
    let Some(observed) = observed_ms else {
        return current;
    };
    let e = (observed - target_ms) / target_ms;
    state.integral = (state.integral + e).clamp(-cfg.integral_limit, cfg.integral_limit);
    let de = state.prev_error.map_or(0.0, |p| e - p);
    state.prev_error = Some(e);
    let delta = cfg.kp * e + cfg.ki * state.integral + cfg.kd * de;
    let next = current as f64 + delta.round();
    next.clamp(min_replicas as f64, u32::MAX as f64) as u32
}

#[derive(Debug, Clone)]
pub struct Pid {
    cfg: PidConfig,
    targets: BTreeMap<String, f64>,
    states: BTreeMap<String, PidState>,
}

impl Pid {
    pub fn new(cfg: PidConfig) -> Self {
        Self {
            cfg,
            targets: BTreeMap::new(),
            states: BTreeMap::new(),
        }
    }

    fn target_for(&self, service: &str) -> f64 {
        self.targets.get(service).copied().unwrap_or(self.cfg.target_latency_ms)
    }
}

impl Scaler for Pid {
    fn register(
        &mut self,
        _: &Monitor<'_>,
        _: &mut Executor<'_>,
        topology: &ServiceTopology,
    ) -> Result<(), ScalerError> {
        let spans = topology.unloaded_span_secs();
        let entry = spans[topology.entry_index()];
        for (spec, span) in topology.services.iter().zip(&spans) {
            self.targets
                .insert(spec.name.clone(), self.cfg.target_latency_ms * span / entry);
        }
        Ok(())
    }

    fn scale(&mut self, monitor: &Monitor<'_>, executor: &mut Executor<'_>) -> Result<(), ScalerError> {
        let services: Vec<String> = monitor.services().map(str::to_string).collect();
        for svc in services {
            let observed = monitor.latency_quantile(&svc, self.cfg.quantile, self.cfg.latency_window_s)?;
            let current = executor.target_replicas(&svc)?;
            let (lo, _) = executor.bounds(&svc)?;
            let target = self.target_for(&svc);
            let state = self.states.entry(svc.clone()).or_default();
            let next = pid_step(state, observed, target, &self.cfg, current, lo);
            if next != current {
                executor.set_replicas(&svc, next)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_only() {
        let cfg = PidConfig {
            ki: 0.0,
            ..PidConfig::default()
        };
        let mut s = PidState::default();
        assert_eq!(pid_step(&mut s, Some(800.0), 400.0, &cfg, 3, 1), 4);
    }

    #[test]
    fn on_target_leaves_integral_alone() {
        let cfg = PidConfig::default();
        let mut s = PidState {
            integral: 2.0,
            prev_error: Some(0.0),
        };
        assert_eq!(pid_step(&mut s, Some(400.0), 400.0, &cfg, 5, 1), 5);
        assert_eq!(s.integral, 2.0);
    }

    #[test]
    fn absent_latency_is_no_change() {
        let cfg = PidConfig::default();
        let mut s = PidState::default();
        assert_eq!(pid_step(&mut s, None, 400.0, &cfg, 7, 1), 7);
        assert_eq!(s, PidState::default());
    }

    #[test]
    fn integral_is_bounded_and_floor_holds() {
        let cfg = PidConfig::default();
        let mut s = PidState::default();
        for _ in 0..100 {
            pid_step(&mut s, Some(40_000.0), 400.0, &cfg, 1, 1);
        }
        assert_eq!(s.integral, cfg.integral_limit);
        assert_eq!(pid_step(&mut s, Some(0.0), 400.0, &cfg, 1, 1), 1);
    }

    #[test]
    fn zero_gains_never_move() {
        let cfg = PidConfig {
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
            ..PidConfig::default()
        };
        let mut s = PidState::default();
        for obs in [0.0, 100.0, 5000.0, 1e6] {
            assert_eq!(pid_step(&mut s, Some(obs), 400.0, &cfg, 4, 1), 4);
        }
    }
}
