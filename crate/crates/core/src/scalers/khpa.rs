use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::scaler::{Executor, Monitor, Scaler, ScalerError};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KhpaConfig {
    /// Target CPU utilization per replica, in (0, 1].
    pub cpu_threshold: f64,
    pub tolerance: f64,
    pub stabilization_window_s: f64,
}

impl Default for KhpaConfig {
    fn default() -> Self {
        Self {
            cpu_threshold: 0.5,
            tolerance: 0.1,
            stabilization_window_s: 300.0,
        }
    }
}

impl KhpaConfig {
    pub fn with_threshold(cpu_threshold: f64) -> Self {
        Self {
            cpu_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.cpu_threshold > 0.0 && self.cpu_threshold <= 1.0) {
            return Err(format!("cpu_threshold must be in (0, 1], got {}", self.cpu_threshold));
        }
        if !(self.tolerance >= 0.0) {
            return Err(format!("tolerance must be >= 0, got {}", self.tolerance));
        }
        if !(self.stabilization_window_s >= 0.0) {
            return Err("stabilization_window_s must be >= 0".into());
        }
        Ok(())
    }
}

/// Unstabilized recommendation: `current` inside the tolerance band,
/// otherwise `ceil(current * utilization / threshold)`.
pub fn khpa_desired(current: u32, utilization: f64, cfg: &KhpaConfig) -> u32 {
    let ratio = utilization / cfg.cpu_threshold;
    if (ratio - 1.0).abs() <= cfg.tolerance {
        return current;
    }
    let desired = (current as f64 * ratio).ceil();
    if desired >= u32::MAX as f64 {
        u32::MAX
    } else {
        desired.max(0.0) as u32
    }
}

#[derive(Debug, Clone)]
pub struct Khpa {
    cfg: KhpaConfig,
    recommendations: BTreeMap<String, VecDeque<(SimTime, u32)>>,
}

impl Khpa {
    pub fn new(cfg: KhpaConfig) -> Self {
        Self {
            cfg,
            recommendations: BTreeMap::new(),
        }
    }

    /// Records a recommendation and returns the largest one inside the
    /// stabilization window, which delays scale-down.
    fn stabilize(&mut self, service: &str, now: SimTime, desired: u32) -> u32 {
        let window = SimTime::from_secs(self.cfg.stabilization_window_s);
        let recs = self.recommendations.entry(service.to_string()).or_default();
        recs.push_back((now, desired));
        while recs.front().is_some_and(|&(t, _)| t + window < now) {
            recs.pop_front();
        }
        recs.iter().map(|&(_, r)| r).max().unwrap_or(desired)
    }
}

impl Scaler for Khpa {
    fn scale(&mut self, monitor: &Monitor<'_>, executor: &mut Executor<'_>) -> Result<(), ScalerError> {
        let now = SimTime::from_secs(monitor.as_of_s());
        let services: Vec<String> = monitor.services().map(str::to_string).collect();
        for svc in services {
            let Some(util) = monitor.cpu_utilization(&svc)? else {
                continue;
            };
            let current = executor.target_replicas(&svc)?;
            let (lo, hi) = executor.bounds(&svc)?;
            let desired = khpa_desired(current, util, &self.cfg).clamp(lo, hi);
            let stabilized = self.stabilize(&svc, now, desired);
            if stabilized != current {
                executor.set_replicas(&svc, stabilized)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recommendation_examples() {
        let cfg = KhpaConfig::with_threshold(0.5);
        assert_eq!(khpa_desired(4, 0.5, &cfg), 4);
        assert_eq!(khpa_desired(2, 0.9, &cfg), 4);
        assert_eq!(khpa_desired(6, 0.1, &cfg), 2);
        assert_eq!(khpa_desired(3, 0.0, &cfg), 0);
    }

    #[test]
    fn tolerance_band() {
        let cfg = KhpaConfig::with_threshold(0.5);
        assert_eq!(khpa_desired(10, 0.54, &cfg), 10);
        assert_eq!(khpa_desired(10, 0.46, &cfg), 10);
        assert_eq!(khpa_desired(10, 0.56, &cfg), 12);
    }

    #[test]
    fn scale_down_waits_for_window() {
        let mut k = Khpa::new(KhpaConfig::with_threshold(0.5));
        assert_eq!(k.stabilize("a", SimTime::from_secs(0.0), 6), 6);
        assert_eq!(k.stabilize("a", SimTime::from_secs(150.0), 2), 6);
        assert_eq!(k.stabilize("a", SimTime::from_secs(300.0), 2), 6);
        assert_eq!(k.stabilize("a", SimTime::from_secs(315.0), 2), 2);
        assert_eq!(k.stabilize("a", SimTime::from_secs(330.0), 8), 8);
    }
}
