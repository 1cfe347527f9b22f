//! Contact plan: when each mule is at each stop, and for how long.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ms, Duration, Result, SimConfig};
use crate::bundle::NodeId;
use crate::Millis;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContactWindow {
    /// Zero-based mule index.
    pub mule: u8,
    pub mule_id: NodeId,
    pub stop: NodeId,
    pub start_ms: Millis,
    pub duration_ms: Millis,
    pub byte_budget: u64,
}

impl ContactWindow {
    pub fn end_ms(&self) -> Millis {
        self.start_ms + self.duration_ms
    }
}

/// Every window that starts before the end of the simulation, ordered by
/// start time, then mule, then stop order.
///
/// Window `(m, k, s)` starts at `k·period + phase(s) + m·period/mule_count`.
/// Uniform durations are drawn in whole milliseconds from one ChaCha8 stream
/// seeded with `seed`, one draw per window in `(mule, cycle, stop)` order.
pub fn build_contact_plan(cfg: &SimConfig) -> Result<Vec<ContactWindow>> {
    cfg.validate()?;
    let period = cfg.period_ms();
    let end = cfg.duration_ms();
    let cycles = end.div_ceil(period) + 1;
    let mules = cfg.mule_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut plan = Vec::new();
    for (m, mule_id) in mules.iter().enumerate() {
        let offset = period * m as u64 / cfg.mule_count as u64;
        for k in 0..cycles {
            for stop in &cfg.stops {
                let duration_ms = match cfg.contact_duration {
                    Duration::Fixed(d) => ms(d),
                    Duration::Uniform { min, max } => rng.random_range(ms(min)..=ms(max)),
                };
                let start_ms = k * period + ms(stop.phase_s) + offset;
                if start_ms >= end {
                    continue;
                }
                plan.push(ContactWindow {
                    mule: m as u8,
                    mule_id: mule_id.clone(),
                    stop: stop.node.clone(),
                    start_ms,
                    duration_ms,
                    byte_budget: cfg.budget_for(duration_ms),
                });
            }
        }
    }
    let stop_index = |id: &NodeId| cfg.stops.iter().position(|s| &s.node == id).unwrap_or(usize::MAX);
    plan.sort_by_key(|w| (w.start_ms, w.mule, stop_index(&w.stop)));
    Ok(plan)
}
