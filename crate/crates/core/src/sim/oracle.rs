//! Closed-form request latency for deterministic schedules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ms, CorpusConfig, Duration, Result, SimConfig, SimError, WorkloadEvent};
use crate::bundle::NodeId;
use crate::Millis;

fn violated<T>(msg: impl Into<String>) -> Result<T> {
    Err(SimError::AssumptionViolated(msg.into()))
}

/// Windows are arithmetic when durations are fixed, so no plan is needed.
struct Schedule {
    period: Millis,
    offsets: Vec<Millis>,
}

impl Schedule {
    fn new(cfg: &SimConfig) -> Self {
        let period = cfg.period_ms();
        let offsets = (0..cfg.mule_count as u64).map(|m| period * m / cfg.mule_count as u64).collect();
        Schedule { period, offsets }
    }

    /// First window of `mule` at phase `phase` starting at or after `t`
    /// (strictly after when `strict`).
    fn next_for(&self, mule: usize, phase: Millis, t: Millis, strict: bool) -> Millis {
        let base = phase + self.offsets[mule];
        let t = if strict { t + 1 } else { t };
        if t <= base {
            return base;
        }
        base + (t - base).div_ceil(self.period) * self.period
    }

    /// Earliest window over all mules, ties going to the lower mule index.
    fn next_any(&self, phase: Millis, t: Millis, strict: bool) -> (usize, Millis) {
        (0..self.offsets.len())
            .map(|m| (m, self.next_for(m, phase, t, strict)))
            .min_by_key(|&(m, s)| (s, m))
            .expect("at least one mule")
    }
}

/// Upper bound on the bytes any single contact may need to carry.
fn worst_case_load(cfg: &SimConfig) -> Result<u64> {
    let article_max = match &cfg.corpus {
        CorpusConfig::Synthetic { max_bytes, .. } => *max_bytes as u64,
        CorpusConfig::Dir(dir) => {
            let rd = std::fs::read_dir(dir).map_err(|e| SimError::Io(e.to_string()))?;
            rd.filter_map(|e| e.ok()?.metadata().ok()).map(|m| m.len()).max().unwrap_or(0)
        }
    };
    let mut total = 0u64;
    for ev in &cfg.workload {
        total += match ev {
            WorkloadEvent::Request { topic, .. } => article_max + 2 * topic.len() as u64,
            WorkloadEvent::Publish { size_bytes, title, .. } => (*size_bytes + title.len()) as u64,
        };
    }
    // JSON escaping of newlines, per-chunk framing and the handshake
    Ok(total + total / 8 + 1024 * 1024)
}

/// Exact round-trip time `(min, max)` for a request made at `request_ms` by
/// `requester`, computed from the schedule alone.
///
/// The request leaves on the first requester window starting at or after the
/// request, reaches the gateway on that mule's next gateway window, and the
/// fetched response leaves on the next gateway window of any mule strictly
/// after delivery. It arrives on that mule's next requester window.
pub fn analytic_bounds(cfg: &SimConfig, requester: &NodeId, request_ms: Millis) -> Result<(Millis, Millis)> {
    cfg.validate()?;
    let d = match cfg.contact_duration {
        Duration::Fixed(d) => ms(d),
        Duration::Uniform { .. } => return violated("contact durations are stochastic"),
    };
    let need = worst_case_load(cfg)?;
    let have = cfg.budget_for(d);
    if have < need {
        return violated(format!("per-contact budget {have} B is below the worst-case load {need} B"));
    }
    let phase_of = |id: &NodeId| cfg.stops.iter().find(|s| &s.node == id).map(|s| ms(s.phase_s));
    let Some(rural) = phase_of(requester) else {
        return Err(SimError::Workload(format!("unknown node {requester}")));
    };
    let gateway = cfg.gateway().and_then(phase_of).ok_or_else(|| SimError::Workload("no urban stop".into()))?;

    let s = Schedule::new(cfg);
    let (m1, pickup) = s.next_any(rural, request_ms, false);
    let delivered = s.next_for(m1, gateway, pickup, true);
    let (m2, response) = s.next_any(gateway, delivered, true);
    let fulfilled = s.next_for(m2, rural, response, true);
    let rtt = fulfilled - request_ms;
    Ok((rtt, rtt))
}

/// Time from `t` to the first window at `stop`, over all mules.
pub fn pickup_wait(cfg: &SimConfig, stop: &NodeId, t: Millis) -> Option<Millis> {
    let phase = cfg.stops.iter().find(|s| &s.node == stop).map(|s| ms(s.phase_s))?;
    let (_, start) = Schedule::new(cfg).next_any(phase, t, false);
    Some(start - t)
}

/// Monte Carlo mean of [`pickup_wait`] in seconds over `samples` request
/// times drawn uniformly from one cycle.
pub fn mean_pickup_wait(cfg: &SimConfig, stop: &NodeId, samples: usize, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = cfg.period_ms();
    let mut sum = 0u128;
    for _ in 0..samples {
        let t = rng.random_range(0..period);
        sum += pickup_wait(cfg, stop, t)? as u128;
    }
    Some(sum as f64 / samples.max(1) as f64 / 1000.0)
}
