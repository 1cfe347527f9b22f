//! Result rows, summary statistics and their on-disk form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{Result, SimConfig, SimError};
use super::plan::ContactWindow;
use crate::Millis;

pub(crate) fn secs(t: Millis) -> f64 {
    t as f64 / 1000.0
}

/// Where a bundle ended up when the simulation stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    Delivered,
    Expired,
    InCustody,
    PartialInFlight,
    Duplicated,
    Lost,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BundleRow {
    pub bundle_id: String,
    pub kind: &'static str,
    pub source: String,
    pub destination: String,
    pub size_bytes: u64,
    pub created_s: f64,
    pub delivered_s: Option<f64>,
    pub latency_s: Option<f64>,
    pub expired_s: Option<f64>,
    pub fate: Fate,
    /// Node holding the complete copy at the end, if exactly one does.
    pub custodian: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestRow {
    pub request_id: String,
    pub node: String,
    pub topic: String,
    pub created_s: f64,
    pub picked_up_s: Option<f64>,
    pub status: &'static str,
    pub reason: Option<String>,
    pub resolved_s: Option<f64>,
    pub rtt_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContactRow {
    pub contact: usize,
    pub mule: String,
    pub stop: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub byte_budget: u64,
    pub bytes_used: u64,
    pub setup_bytes: u64,
    pub payload_bytes: u64,
    pub goodput_bps: f64,
    pub frames: u64,
    pub budget_exhausted: bool,
    pub aborted: bool,
    pub stop_outcome: String,
    pub mule_outcome: String,
    pub completed: usize,
    pub resumed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferRow {
    pub contact: usize,
    pub at_s: f64,
    pub from: String,
    pub to: String,
    pub bundle_id: String,
    pub total_bytes: u64,
    pub start_offset: u64,
    pub bytes: u64,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FreshnessRow {
    pub t_s: f64,
    pub node: String,
    /// Age of the newest catalog item; empty while the catalog is empty.
    pub age_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub created: usize,
    pub delivered: usize,
    pub expired: usize,
    pub in_custody: usize,
    pub partial_in_flight: usize,
    pub duplicated: usize,
    pub lost: usize,
}

impl Conservation {
    pub fn count(rows: &[BundleRow]) -> Self {
        let mut c = Conservation { created: rows.len(), ..Default::default() };
        for r in rows {
            match r.fate {
                Fate::Delivered => c.delivered += 1,
                Fate::Expired => c.expired += 1,
                Fate::InCustody => c.in_custody += 1,
                Fate::PartialInFlight => c.partial_in_flight += 1,
                Fate::Duplicated => c.duplicated += 1,
                Fate::Lost => c.lost += 1,
            }
        }
        c
    }

    /// Every bundle is in exactly one acceptable state.
    pub fn holds(&self) -> bool {
        self.duplicated == 0
            && self.lost == 0
            && self.delivered + self.expired + self.in_custody + self.partial_in_flight == self.created
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub name: Option<String>,
    pub seed: u64,
    pub cycle_period_s: f64,
    pub mule_count: u8,
    pub sim_duration_s: f64,
    pub contacts: usize,
    pub aborted_sessions: usize,
    pub resumed_transfers: usize,
    pub resumed_bytes: u64,
    pub payload_bytes: u64,
    pub mean_goodput_bps: Option<f64>,
    pub max_goodput_bps: Option<f64>,
    pub bundles_created: usize,
    pub bundles_delivered: usize,
    pub mean_delivery_latency_s: Option<f64>,
    pub requests: usize,
    pub requests_fulfilled: usize,
    pub requests_failed: usize,
    pub requests_open: usize,
    pub mean_rtt_s: Option<f64>,
    pub median_rtt_s: Option<f64>,
    pub max_rtt_s: Option<f64>,
    pub mean_freshness_s: Option<f64>,
    /// Largest handshake cost seen before the first CHUNK, beacon included.
    pub discovery_cost_bytes: u64,
    /// The same cost as link time at the configured rate and overhead.
    pub discovery_cost_s: f64,
    pub conservation: Conservation,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn max(xs: &[f64]) -> Option<f64> {
    xs.iter().copied().max_by(f64::total_cmp)
}

/// Everything a simulation run measured.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub plan: Vec<ContactWindow>,
    pub bundles: Vec<BundleRow>,
    pub requests: Vec<RequestRow>,
    pub contacts: Vec<ContactRow>,
    pub transfers: Vec<TransferRow>,
    pub freshness: Vec<FreshnessRow>,
}

impl SimReport {
    pub fn conservation(&self) -> Conservation {
        Conservation::count(&self.bundles)
    }

    /// Request round trips in seconds, keyed by request id.
    pub fn rtts(&self) -> BTreeMap<String, f64> {
        self.requests.iter().filter_map(|r| Some((r.request_id.clone(), r.rtt_s?))).collect()
    }

    /// CHUNK payload bytes moved for one bundle, over all hops.
    pub fn chunk_bytes_for(&self, bundle_id: &str) -> u64 {
        self.transfers.iter().filter(|t| t.bundle_id == bundle_id).map(|t| t.bytes).sum()
    }

    pub fn summary(&self) -> Summary {
        let c = &self.config;
        let rtts: Vec<f64> = self.requests.iter().filter_map(|r| r.rtt_s).collect();
        let latencies: Vec<f64> = self.bundles.iter().filter_map(|b| b.latency_s).collect();
        let goodput: Vec<f64> = self.contacts.iter().map(|r| r.goodput_bps).collect();
        let fresh: Vec<f64> = self.freshness.iter().filter_map(|f| f.age_s).collect();
        let discovery = self.contacts.iter().map(|r| r.setup_bytes).max().unwrap_or(0);
        let link_bytes_per_s = c.link_rate_bps as f64 / 8.0 * (1.0 - c.protocol_overhead);
        let resumed_bytes =
            self.transfers.iter().filter(|t| t.start_offset > 0).map(|t| t.total_bytes - t.start_offset).sum();
        Summary {
            name: c.name.clone(),
            seed: c.seed,
            cycle_period_s: c.cycle_period_s,
            mule_count: c.mule_count,
            sim_duration_s: c.sim_duration_s,
            contacts: self.contacts.len(),
            aborted_sessions: self.contacts.iter().filter(|r| r.aborted).count(),
            resumed_transfers: self.contacts.iter().map(|r| r.resumed).sum(),
            resumed_bytes,
            payload_bytes: self.contacts.iter().map(|r| r.payload_bytes).sum(),
            mean_goodput_bps: mean(&goodput),
            max_goodput_bps: max(&goodput),
            bundles_created: self.bundles.len(),
            bundles_delivered: self.bundles.iter().filter(|b| b.delivered_s.is_some()).count(),
            mean_delivery_latency_s: mean(&latencies),
            requests: self.requests.len(),
            requests_fulfilled: self.requests.iter().filter(|r| r.status == "fulfilled").count(),
            requests_failed: self.requests.iter().filter(|r| r.status == "failed").count(),
            requests_open: self.requests.iter().filter(|r| r.resolved_s.is_none()).count(),
            mean_rtt_s: mean(&rtts),
            median_rtt_s: median(&rtts),
            max_rtt_s: max(&rtts),
            mean_freshness_s: mean(&fresh),
            discovery_cost_bytes: discovery,
            discovery_cost_s: discovery as f64 / link_bytes_per_s,
            conservation: self.conservation(),
        }
    }

    /// Writes the CSV files and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io)?;
        write_csv(&dir.join("bundles.csv"), &self.bundles)?;
        write_csv(&dir.join("requests.csv"), &self.requests)?;
        write_csv(&dir.join("contacts.csv"), &self.contacts)?;
        write_csv(&dir.join("transfers.csv"), &self.transfers)?;
        write_csv(&dir.join("freshness.csv"), &self.freshness)?;
        let mut json = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        json.push('\n');
        fs::write(dir.join("summary.json"), json).map_err(io)
    }
}

fn io(e: impl std::fmt::Display) -> SimError {
    SimError::Io(e.to_string())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(io)
}
