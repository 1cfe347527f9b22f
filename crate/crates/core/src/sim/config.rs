//! Scenario description.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bundle::{NodeId, NodeRole};
use crate::Millis;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("analytic assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("node failure: {0}")]
    Node(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SimError::InvalidConfig(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopConfig {
    pub node: NodeId,
    pub role: NodeRole,
    pub phase_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Fixed(f64),
    Uniform { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusConfig {
    /// Every topic exists; sizes are drawn from the range, keyed on seed and topic.
    Synthetic { min_bytes: usize, max_bytes: usize },
    /// Articles read from `<dir>/<slug>.txt`.
    Dir(std::path::PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadEvent {
    Request { at_s: f64, node: NodeId, topic: String },
    Publish { at_s: f64, node: NodeId, title: String, size_bytes: usize },
}

impl WorkloadEvent {
    pub fn at_s(&self) -> f64 {
        match self {
            WorkloadEvent::Request { at_s, .. } | WorkloadEvent::Publish { at_s, .. } => *at_s,
        }
    }

    pub fn node(&self) -> &NodeId {
        match self {
            WorkloadEvent::Request { node, .. } | WorkloadEvent::Publish { node, .. } => node,
        }
    }
}

fn d_period() -> f64 {
    2400.0
}
fn d_duration() -> Duration {
    Duration::Uniform { min: 5.0, max: 30.0 }
}
fn d_rate() -> u64 {
    20_000_000
}
fn d_overhead() -> f64 {
    0.05
}
fn d_mules() -> u8 {
    1
}
fn d_sim_duration() -> f64 {
    48.0 * 3600.0
}
fn d_chunk() -> u64 {
    64 * 1024
}
fn d_freshness() -> f64 {
    600.0
}
fn d_request_ttl() -> f64 {
    3.0 * 24.0 * 3600.0
}
fn d_content_ttl() -> f64 {
    7.0 * 24.0 * 3600.0
}
fn d_corpus() -> CorpusConfig {
    CorpusConfig::Synthetic { min_bytes: 10_000_000, max_bytes: 30_000_000 }
}
fn d_stops() -> Vec<StopConfig> {
    vec![
        StopConfig { node: NodeId::new("rural-1").unwrap(), role: NodeRole::Rural, phase_s: 0.0 },
        StopConfig { node: NodeId::new("urban-1").unwrap(), role: NodeRole::Urban, phase_s: 1200.0 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "d_period")]
    pub cycle_period_s: f64,
    #[serde(default = "d_stops")]
    pub stops: Vec<StopConfig>,
    #[serde(default = "d_duration")]
    pub contact_duration: Duration,
    #[serde(default = "d_rate")]
    pub link_rate_bps: u64,
    #[serde(default = "d_overhead")]
    pub protocol_overhead: f64,
    #[serde(default = "d_mules")]
    pub mule_count: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_sim_duration")]
    pub sim_duration_s: f64,
    #[serde(default = "d_chunk")]
    pub chunk_size: u64,
    #[serde(default = "d_corpus")]
    pub corpus: CorpusConfig,
    #[serde(default = "d_freshness")]
    pub freshness_interval_s: f64,
    #[serde(default = "d_request_ttl")]
    pub request_ttl_s: f64,
    #[serde(default = "d_content_ttl")]
    pub content_ttl_s: f64,
    #[serde(default)]
    pub workload: Vec<WorkloadEvent>,
}

impl Default for SimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Seconds to whole milliseconds.
pub fn ms(s: f64) -> Millis {
    (s * 1000.0).round() as Millis
}

/// Overhead as parts per million, so budgets are exact integers.
pub(crate) fn overhead_ppm(f: f64) -> u64 {
    (f * 1_000_000.0).round() as u64
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overrides one top-level key with a JSON value (used by sweeps).
    pub fn with_key(&self, key: &str, value: serde_json::Value) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        if !obj.contains_key(key) {
            return invalid(format!("unknown key {key:?}"));
        }
        obj.insert(key.to_string(), value);
        let cfg: SimConfig = serde_json::from_value(v).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn period_ms(&self) -> Millis {
        ms(self.cycle_period_s)
    }

    pub fn duration_ms(&self) -> Millis {
        ms(self.sim_duration_s)
    }

    pub fn mule_ids(&self) -> Vec<NodeId> {
        (1..=self.mule_count).map(|i| NodeId::new(format!("mule-{i}")).unwrap()).collect()
    }

    /// The urban stop that receives topic requests.
    pub fn gateway(&self) -> Option<&NodeId> {
        self.stops.iter().find(|s| s.role == NodeRole::Urban).map(|s| &s.node)
    }

    pub fn budget_for(&self, duration_ms: Millis) -> u64 {
        budget(duration_ms, self.link_rate_bps, overhead_ppm(self.protocol_overhead))
    }

    // negated comparisons so that NaN fails too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.cycle_period_s > 0.0) || self.period_ms() == 0 {
            return invalid("cycle_period_s must be > 0");
        }
        if !(self.sim_duration_s > 0.0) {
            return invalid("sim_duration_s must be > 0");
        }
        if self.link_rate_bps == 0 {
            return invalid("link_rate_bps must be > 0");
        }
        if !(0.0..1.0).contains(&self.protocol_overhead) {
            return invalid("protocol_overhead must be in [0, 1)");
        }
        if self.mule_count == 0 {
            return invalid("mule_count must be >= 1");
        }
        if self.chunk_size == 0 || self.chunk_size > 512 * 1024 {
            return invalid("chunk_size must be in 1..=524288");
        }
        if self.stops.is_empty() {
            return invalid("stops must not be empty");
        }
        let mut ids = BTreeSet::new();
        for s in &self.stops {
            if s.role == NodeRole::Mule {
                return invalid(format!("stop {} cannot be a mule", s.node));
            }
            if !(0.0..self.cycle_period_s).contains(&s.phase_s) {
                return invalid(format!("phase of {} must be in [0, cycle_period_s)", s.node));
            }
            if !ids.insert(s.node.clone()) {
                return invalid(format!("stop {} listed twice", s.node));
            }
        }
        for m in self.mule_ids() {
            if ids.contains(&m) {
                return invalid(format!("{m} is reserved for mules"));
            }
        }
        let (min, max) = match self.contact_duration {
            Duration::Fixed(d) => (d, d),
            Duration::Uniform { min, max } => (min, max),
        };
        if !(min > 0.0) || min > max {
            return invalid("contact durations need 0 < min <= max");
        }
        // one mule's windows must not overlap
        let mut phases: Vec<Millis> = self.stops.iter().map(|s| ms(s.phase_s)).collect();
        phases.sort_unstable();
        let period = self.period_ms();
        let min_gap = phases
            .windows(2)
            .map(|w| w[1] - w[0])
            .chain(std::iter::once(period - phases[phases.len() - 1] + phases[0]))
            .min()
            .unwrap_or(period);
        if ms(max) > min_gap {
            return invalid(format!("contacts up to {max} s overlap the next stop {} s later", min_gap as f64 / 1000.0));
        }
        if let CorpusConfig::Synthetic { min_bytes, max_bytes } = self.corpus {
            if min_bytes > max_bytes {
                return invalid("corpus min_bytes > max_bytes");
            }
        }
        for ev in &self.workload {
            let stop = self.stops.iter().find(|s| &s.node == ev.node());
            match (ev, stop) {
                (_, None) => return Err(SimError::Workload(format!("unknown node {}", ev.node()))),
                (WorkloadEvent::Request { .. }, Some(s)) if s.role != NodeRole::Rural => {
                    return Err(SimError::Workload(format!("requests come from rural nodes, not {}", s.node)))
                }
                (WorkloadEvent::Request { topic, .. }, _) if topic.trim().is_empty() => {
                    return Err(SimError::Workload("empty topic".into()))
                }
                _ => {}
            }
            if !(ev.at_s() >= 0.0) {
                return Err(SimError::Workload("event time must be >= 0".into()));
            }
        }
        if self.workload.iter().any(|e| matches!(e, WorkloadEvent::Request { .. })) && self.gateway().is_none() {
            return Err(SimError::Workload("requests need an urban stop".into()));
        }
        Ok(())
    }
}

/// `floor(duration × rate/8 × (1 − overhead))` in integer arithmetic.
pub fn budget(duration_ms: Millis, rate_bps: u64, overhead_ppm: u64) -> u64 {
    let num = duration_ms as u128 * rate_bps as u128 * (1_000_000 - overhead_ppm.min(1_000_000)) as u128;
    (num / (8 * 1000 * 1_000_000)) as u64
}

pub const CAMPUS_DEFAULT: &str = include_str!("../../scenarios/campus-default.json");

/// Built-in scenarios by name.
pub fn builtin(name: &str) -> Option<SimConfig> {
    match name {
        "campus-default" => Some(SimConfig::from_json(CAMPUS_DEFAULT).expect("bundled scenario is valid")),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_arithmetic() {
        assert_eq!(budget(10_000, 20_000_000, 50_000), 23_750_000);
        assert_eq!(budget(30_000, 20_000_000, 50_000), 71_250_000);
        assert_eq!(budget(5_000, 20_000_000, 50_000), 11_875_000);
        assert_eq!(budget(1, 8, 0), 0);
    }

    #[test]
    fn defaults() {
        let c = SimConfig::default();
        assert_eq!(c.cycle_period_s, 2400.0);
        assert_eq!(c.contact_duration, Duration::Uniform { min: 5.0, max: 30.0 });
        assert_eq!(c.link_rate_bps, 20_000_000);
        assert_eq!(c.protocol_overhead, 0.05);
        assert_eq!(c.mule_count, 1);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            r#"{"cycle_period_s": 0}"#,
            r#"{"contact_duration": {"uniform": {"min": 30, "max": 5}}}"#,
            r#"{"link_rate_bps": 0}"#,
            r#"{"stops": [{"node": "rural-1", "role": "rural", "phase_s": 2400}]}"#,
            r#"{"contact_duration": {"fixed": 1300}}"#,
            r#"{"bogus": 1}"#,
        ];
        for b in bad {
            assert!(matches!(SimConfig::from_json(b), Err(SimError::InvalidConfig(_))), "{b}");
        }
        let wl = r#"{"workload": [{"type": "request", "at_s": 1, "node": "rural-9", "topic": "x"}]}"#;
        assert!(matches!(SimConfig::from_json(wl), Err(SimError::Workload(_))));
    }

    #[test]
    fn campus_default_parses() {
        let c = builtin("campus-default").unwrap();
        assert_eq!(c.sim_duration_s, 48.0 * 3600.0);
        let requests: Vec<f64> = c
            .workload
            .iter()
            .filter(|e| matches!(e, WorkloadEvent::Request { .. }))
            .map(|e| e.at_s())
            .collect();
        assert_eq!(requests.len(), 10);
        assert!(requests.iter().all(|&t| t < 12.0 * 3600.0));
    }

    #[test]
    fn sweep_key_override() {
        let c = SimConfig::default().with_key("mule_count", serde_json::json!(3)).unwrap();
        assert_eq!(c.mule_count, 3);
        assert!(SimConfig::default().with_key("nope", serde_json::json!(3)).is_err());
    }
}
