//! Offline commands: simulation, sweeps, reports and corpus generation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtn_learn::gateway::{slug, synthetic_text, SyntheticSource};
use dtn_learn::sim::{builtin, run_sim, SimConfig, SimError, Summary, WorkloadEvent};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    /// Bad scenario, flag value or sweep range (exit 2).
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

fn io(e: impl std::fmt::Display) -> CommandError {
    CommandError::Io(e.to_string())
}

impl From<SimError> for CommandError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) | SimError::Workload(_) | SimError::AssumptionViolated(_) => {
                CommandError::Invalid(e.to_string())
            }
            SimError::Node(_) | SimError::Io(_) => CommandError::Io(e.to_string()),
        }
    }
}

/// A bundled scenario name or a path to a scenario file.
pub fn load_scenario(name: &str) -> Result<SimConfig, CommandError> {
    let path = Path::new(name);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(io)?;
        return Ok(SimConfig::from_json(&text)?);
    }
    let mut cfg = builtin(name).ok_or_else(|| CommandError::Invalid(format!("no scenario file or bundled scenario {name:?}")))?;
    cfg.name.get_or_insert_with(|| name.to_string());
    Ok(cfg)
}

/// `key=a..b` with inclusive integer bounds.
pub fn parse_sweep(arg: &str) -> Result<(String, Vec<i64>), CommandError> {
    let bad = || CommandError::Invalid(format!("sweep must look like key=a..b, got {arg:?}"));
    let (key, range) = arg.split_once('=').ok_or_else(bad)?;
    let (a, b) = range.split_once("..").ok_or_else(bad)?;
    let a: i64 = a.trim().parse().map_err(|_| bad())?;
    let b: i64 = b.trim().parse().map_err(|_| bad())?;
    if key.trim().is_empty() || a > b {
        return Err(bad());
    }
    Ok((key.trim().to_string(), (a..=b).collect()))
}

/// Runs one scenario, writing metrics into `out`. Node state lives in
/// `out/state` during the run and is removed afterwards.
pub fn simulate(cfg: &SimConfig, out: &Path) -> Result<Summary, CommandError> {
    fs::create_dir_all(out).map_err(io)?;
    let state = out.join("state");
    let run = run_sim(cfg, &state)?;
    run.report.write(out)?;
    drop(run.nodes);
    fs::remove_dir_all(&state).map_err(io)?;
    Ok(run.report.summary())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

pub fn format_summary(s: &Summary) -> String {
    let mut t = String::new();
    let c = &s.conservation;
    let rows: Vec<(&str, String)> = vec![
        ("scenario", s.name.clone().unwrap_or_else(|| "-".into())),
        ("seed", s.seed.to_string()),
        ("mule period", format!("{} s", s.cycle_period_s)),
        ("mules", s.mule_count.to_string()),
        ("contacts", s.contacts.to_string()),
        (
            "requests",
            format!(
                "{} ({} fulfilled, {} failed, {} open)",
                s.requests, s.requests_fulfilled, s.requests_failed, s.requests_open
            ),
        ),
        ("mean rtt", format!("{} s", opt(s.mean_rtt_s))),
        ("median rtt", format!("{} s", opt(s.median_rtt_s))),
        ("deliveries", format!("{} of {} bundles", s.bundles_delivered, s.bundles_created)),
        ("aborted sessions", s.aborted_sessions.to_string()),
        ("resumed transfers", format!("{} ({} bytes)", s.resumed_transfers, s.resumed_bytes)),
        ("mean freshness", format!("{} s", opt(s.mean_freshness_s))),
        ("discovery cost", format!("{} B ({:.6} s)", s.discovery_cost_bytes, s.discovery_cost_s)),
        (
            "conservation",
            format!(
                "delivered {} expired {} in_custody {} partial {} duplicated {} lost {}",
                c.delivered, c.expired, c.in_custody, c.partial_in_flight, c.duplicated, c.lost
            ),
        ),
    ];
    for (k, v) in rows {
        let _ = writeln!(t, "{k:<18} {v}");
    }
    t
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub value: i64,
    pub mean_rtt_s: Option<f64>,
    pub median_rtt_s: Option<f64>,
    pub fulfilled: usize,
    pub requests: usize,
    pub aborted_sessions: usize,
    pub resumed_transfers: usize,
    pub mean_freshness_s: Option<f64>,
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut t = String::new();
    if let Some(r) = rows.first() {
        let _ = writeln!(t, "{:>12} {:>12} {:>12} {:>10} {:>8} {:>8} {:>14}", r.key, "mean_rtt_s", "median_rtt_s", "fulfilled", "aborts", "resumes", "freshness_s");
    }
    for r in rows {
        let _ = writeln!(
            t,
            "{:>12} {:>12} {:>12} {:>10} {:>8} {:>8} {:>14}",
            r.value,
            opt(r.mean_rtt_s),
            opt(r.median_rtt_s),
            format!("{}/{}", r.fulfilled, r.requests),
            r.aborted_sessions,
            r.resumed_transfers,
            opt(r.mean_freshness_s)
        );
    }
    t
}

/// One run per value; each lands in `out/<key>-<value>`, with `sweep.csv` on top.
pub fn sweep(cfg: &SimConfig, key: &str, values: &[i64], out: &Path) -> Result<Vec<SweepRow>, CommandError> {
    let mut rows = Vec::new();
    for &v in values {
        let c = cfg.with_key(key, serde_json::json!(v))?;
        let s = simulate(&c, &out.join(format!("{key}-{v}")))?;
        rows.push(SweepRow {
            key: key.to_string(),
            value: v,
            mean_rtt_s: s.mean_rtt_s,
            median_rtt_s: s.median_rtt_s,
            fulfilled: s.requests_fulfilled,
            requests: s.requests,
            aborted_sessions: s.aborted_sessions,
            resumed_transfers: s.resumed_transfers,
            mean_freshness_s: s.mean_freshness_s,
        });
    }
    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(io)?;
    for r in &rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

/// Summary table for a finished output directory (single run or sweep).
pub fn report(dir: &Path) -> Result<String, CommandError> {
    let sweep = dir.join("sweep.csv");
    if sweep.is_file() {
        let mut r = csv::Reader::from_path(&sweep).map_err(io)?;
        let rows = r.deserialize().collect::<Result<Vec<SweepRow>, _>>().map_err(io)?;
        return Ok(format_sweep(&rows));
    }
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| CommandError::Io(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(io)?;
    let s = summary_from_json(&v).ok_or_else(|| CommandError::Invalid(format!("{} is not a summary", path.display())))?;
    Ok(format_summary(&s))
}

fn summary_from_json(v: &serde_json::Value) -> Option<Summary> {
    let f = |k: &str| v.get(k).and_then(|x| x.as_f64());
    let u = |k: &str| v.get(k).and_then(|x| x.as_u64()).map(|x| x as usize);
    let c = v.get("conservation")?;
    let cu = |k: &str| c.get(k).and_then(|x| x.as_u64()).unwrap_or(0) as usize;
    Some(Summary {
        name: v.get("name").and_then(|x| x.as_str()).map(str::to_string),
        seed: v.get("seed")?.as_u64()?,
        cycle_period_s: f("cycle_period_s")?,
        mule_count: u("mule_count")? as u8,
        sim_duration_s: f("sim_duration_s")?,
        contacts: u("contacts")?,
        aborted_sessions: u("aborted_sessions")?,
        resumed_transfers: u("resumed_transfers")?,
        resumed_bytes: u("resumed_bytes")? as u64,
        payload_bytes: u("payload_bytes")? as u64,
        mean_goodput_bps: f("mean_goodput_bps"),
        max_goodput_bps: f("max_goodput_bps"),
        bundles_created: u("bundles_created")?,
        bundles_delivered: u("bundles_delivered")?,
        mean_delivery_latency_s: f("mean_delivery_latency_s"),
        requests: u("requests")?,
        requests_fulfilled: u("requests_fulfilled")?,
        requests_failed: u("requests_failed")?,
        requests_open: u("requests_open")?,
        mean_rtt_s: f("mean_rtt_s"),
        median_rtt_s: f("median_rtt_s"),
        max_rtt_s: f("max_rtt_s"),
        mean_freshness_s: f("mean_freshness_s"),
        discovery_cost_bytes: u("discovery_cost_bytes")? as u64,
        discovery_cost_s: f("discovery_cost_s")?,
        conservation: dtn_learn::sim::Conservation {
            created: cu("created"),
            delivered: cu("delivered"),
            expired: cu("expired"),
            in_custody: cu("in_custody"),
            partial_in_flight: cu("partial_in_flight"),
            duplicated: cu("duplicated"),
            lost: cu("lost"),
        },
    })
}

/// Byte counts like `30000000`, `30MB`, `512KiB` (decimal and binary units).
pub fn parse_size(s: &str) -> Result<usize, CommandError> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: usize = num.parse().map_err(|_| CommandError::Invalid(format!("bad size {s:?}")))?;
    let mult = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "kb" => 1_000,
        "mb" => 1_000_000,
        "gb" => 1_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        other => return Err(CommandError::Invalid(format!("unknown size unit {other:?}"))),
    };
    n.checked_mul(mult).ok_or_else(|| CommandError::Invalid(format!("size {s:?} overflows")))
}

pub fn parse_size_range(s: &str) -> Result<(usize, usize), CommandError> {
    let (a, b) = s.split_once("..").ok_or_else(|| CommandError::Invalid(format!("size range must be MIN..MAX, got {s:?}")))?;
    let (a, b) = (parse_size(a)?, parse_size(b)?);
    if a > b {
        return Err(CommandError::Invalid(format!("size range {s:?} has min > max")));
    }
    Ok((a, b))
}

const TOPICS: &[&str] = &[
    "Photosynthesis", "Water cycle", "Fractions", "Volcanoes", "Electric circuits", "Human heart",
    "Solar system", "Plate tectonics", "World geography", "Ancient Egypt", "Algebra", "Climate",
    "Cell division", "Magnetism", "Rivers", "Nutrition", "Ecosystems", "Geometry", "Weather",
    "Rainforests", "Sound", "Light", "Gravity", "Soil", "Democracy", "Trade routes", "Irrigation",
    "Vaccines", "Probability", "Maps",
];

/// Title `i` of a generated corpus.
pub fn corpus_title(i: usize) -> String {
    let base = TOPICS[i % TOPICS.len()];
    match i / TOPICS.len() {
        0 => base.to_string(),
        n => format!("{base} {}", n + 1),
    }
}

/// Writes `count` articles as `<slug>.txt`, sized uniformly in the range.
pub fn gen_corpus(count: usize, min: usize, max: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CommandError> {
    fs::create_dir_all(out).map_err(io)?;
    let sizes = SyntheticSource { seed, min_len: min, max_len: max };
    let mut written = Vec::new();
    for i in 0..count {
        let title = corpus_title(i);
        let len = sizes.article_len(&title).max(title.len() + 2);
        let path = out.join(format!("{}.txt", slug(&title)));
        fs::write(&path, synthetic_text(seed, &title, len)).map_err(io)?;
        written.push(path);
    }
    Ok(written)
}

/// `count` requests from `node` at uniformly random times in the first
/// `hours`, sorted by time.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn gen_workload(count: usize, hours: f64, node: &str, seed: u64) -> Result<Vec<WorkloadEvent>, CommandError> {
    if !(hours > 0.0) {
        return Err(CommandError::Invalid("hours must be > 0".into()));
    }
    let node = dtn_learn::NodeId::new(node).map_err(|e| CommandError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = (hours * 3600.0) as u64;
    let mut times: Vec<u64> = (0..count).map(|_| rng.random_range(0..horizon.max(1))).collect();
    times.sort_unstable();
    Ok(times
        .into_iter()
        .enumerate()
        .map(|(i, t)| WorkloadEvent::Request { at_s: t as f64, node: node.clone(), topic: corpus_title(i) })
        .collect())
}
