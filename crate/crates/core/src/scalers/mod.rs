//! Reference scalers: no-op, threshold-based CPU (Kubernetes HPA style),
//! PID on tail latency, and a linear-forecast predictive scaler.

mod khpa;
mod none;
mod pid;
mod predictive;

pub use khpa::{khpa_desired, Khpa, KhpaConfig};
pub use none::NoneScaler;
pub use pid::{pid_step, Pid, PidConfig, PidState};
pub use predictive::{forecast_rate, predictive_desired, replicas_for_rate, Predictive, PredictiveConfig};

use crate::error::{Error, Result};
use crate::scaler::Scaler;

pub const SCALER_IDS: [&str; 4] = ["none", "khpa", "pid", "predictive"];

/// Builds a scaler from its id and JSON parameters. `null` parameters mean
/// defaults.
pub fn build_scaler(id: &str, params: &serde_json::Value) -> Result<Box<dyn Scaler>> {
    let params = if params.is_null() {
        serde_json::Value::Object(Default::default())
    } else {
        params.clone()
    };
    let bad = |e: String| Error::Config(vec![format!("scaler {id}: {e}")]);
    match id {
        "none" => {
            if params.as_object().is_some_and(|o| !o.is_empty()) {
                return Err(bad("takes no parameters".into()));
            }
            Ok(Box::new(NoneScaler))
        }
        "khpa" => {
            let cfg: KhpaConfig = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            cfg.validate().map_err(bad)?;
            Ok(Box::new(Khpa::new(cfg)))
        }
        "pid" => {
            let cfg: PidConfig = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            cfg.validate().map_err(bad)?;
            Ok(Box::new(Pid::new(cfg)))
        }
        "predictive" => {
            let cfg: PredictiveConfig = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            cfg.validate().map_err(bad)?;
            Ok(Box::new(Predictive::new(cfg)))
        }
        other => Err(Error::Config(vec![format!(
            "unknown scaler id {other:?} (expected one of {})",
            SCALER_IDS.join(", ")
        )])),
    }
}
