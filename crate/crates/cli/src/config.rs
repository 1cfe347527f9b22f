//! Per-node daemon configuration: one TOML file, overridable from `DTLN_*`
//! environment variables.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use dtn_learn::gateway::GatewayConfig;
use dtn_learn::node::{NodeSettings, DEFAULT_CONTENT_TTL_MS, DEFAULT_REQUEST_TTL_MS};
use dtn_learn::proto::SessionConfig;
use dtn_learn::routing::RoleGraph;
use dtn_learn::store::{StoreConfig, DEFAULT_QUOTA};
use dtn_learn::{NodeId, NodeRole};

pub const ENV_PREFIX: &str = "DTLN_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {message}")]
    Field { field: &'static str, message: String },
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, message: message.into() }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerEntry {
    pub id: String,
    pub role: String,
    /// Session address of a mule; otherwise the beacon's source address is used.
    #[serde(default)]
    pub addr: Option<SocketAddr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusBackend {
    Dir,
    Synthetic,
}

fn d_beacon_interval() -> u64 {
    1000
}
fn d_tick() -> u64 {
    1000
}
fn d_retry() -> u64 {
    5000
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    id: String,
    role: String,
    data_dir: PathBuf,
    #[serde(default)]
    quota_bytes: Option<u64>,
    #[serde(default)]
    listen: Option<SocketAddr>,
    #[serde(default)]
    beacon_listen: Option<SocketAddr>,
    #[serde(default)]
    beacon_targets: Vec<SocketAddr>,
    #[serde(default = "d_beacon_interval")]
    beacon_interval_ms: u64,
    #[serde(default = "d_true")]
    beacon_enabled: bool,
    #[serde(default)]
    api_bind: Option<SocketAddr>,
    #[serde(default)]
    gateway: Option<String>,
    #[serde(default)]
    sync_to: Vec<String>,
    #[serde(default)]
    corpus_backend: Option<CorpusBackend>,
    #[serde(default)]
    corpus_path: Option<PathBuf>,
    #[serde(default)]
    corpus_seed: u64,
    #[serde(default)]
    corpus_min_bytes: Option<usize>,
    #[serde(default)]
    corpus_max_bytes: Option<usize>,
    #[serde(default)]
    chunk_size: Option<u64>,
    #[serde(default)]
    hello_timeout_ms: Option<u64>,
    #[serde(default)]
    idle_timeout_ms: Option<u64>,
    #[serde(default = "d_tick")]
    tick_interval_ms: u64,
    #[serde(default = "d_retry")]
    contact_retry_ms: u64,
    #[serde(default)]
    link_rate_bps: Option<u64>,
    #[serde(default)]
    request_ttl_s: Option<u64>,
    #[serde(default)]
    content_ttl_s: Option<u64>,
    #[serde(default)]
    fetch_max_retries: Option<u8>,
    #[serde(default)]
    fetch_backoff_ms: Option<u64>,
    #[serde(default = "d_true")]
    sync: bool,
    #[serde(default)]
    nodes: Vec<PeerEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusChoice {
    Dir(PathBuf),
    Synthetic { seed: u64, min_bytes: usize, max_bytes: usize },
}

/// Validated daemon configuration.
#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub id: NodeId,
    pub role: NodeRole,
    pub data_dir: PathBuf,
    pub quota_bytes: u64,
    /// Session listener (mules).
    pub listen: Option<SocketAddr>,
    /// Beacon receiver (rural and urban).
    pub beacon_listen: Option<SocketAddr>,
    /// Where a mule sends beacons.
    pub beacon_targets: Vec<SocketAddr>,
    pub beacon_interval_ms: u64,
    pub beacon_enabled: bool,
    pub api_bind: Option<SocketAddr>,
    pub gateway: Option<NodeId>,
    pub sync_to: Vec<NodeId>,
    pub corpus: Option<CorpusChoice>,
    pub session: SessionConfig,
    pub tick_interval_ms: u64,
    pub contact_retry_ms: u64,
    /// Sender-side pacing in bits per second; `None` sends as fast as TCP allows.
    pub link_rate_bps: Option<u64>,
    pub request_ttl_ms: u64,
    pub content_ttl_ms: u64,
    pub fetch: GatewayConfig,
    pub sync: bool,
    pub graph: RoleGraph,
    /// Known session addresses by node.
    pub addrs: Vec<(NodeId, SocketAddr)>,
}

/// Turns an environment value into TOML: numbers, booleans and arrays
/// parse as themselves, anything else is a string.
fn env_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text, std::env::vars())
    }

    /// Parses `text`, then applies `DTLN_<KEY>` overrides from `env`.
    pub fn parse(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter_map(|(k, v)| Some((k.strip_prefix(ENV_PREFIX)?.to_lowercase(), v))).collect();
        overrides.sort();
        for (k, v) in overrides {
            table.insert(k, env_value(&v));
        }
        let raw: RawConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::validate(raw)
    }

    fn validate(raw: RawConfig) -> Result<Self, ConfigError> {
        let id = NodeId::new(raw.id.clone()).map_err(|e| field("id", e.to_string()))?;
        let role = NodeRole::from_str(&raw.role).map_err(|_| field("role", format!("unknown role {:?}", raw.role)))?;
        let node_id = |f: &'static str, s: &str| NodeId::new(s).map_err(|e| field(f, e.to_string()));

        let mut members = Vec::new();
        let mut addrs = Vec::new();
        for p in &raw.nodes {
            let pid = node_id("nodes.id", &p.id)?;
            let prole =
                NodeRole::from_str(&p.role).map_err(|_| field("nodes.role", format!("unknown role {:?}", p.role)))?;
            if let Some(a) = p.addr {
                addrs.push((pid.clone(), a));
            }
            members.push((pid, prole));
        }
        if !members.iter().any(|(n, _)| n == &id) {
            members.push((id.clone(), role));
        }
        let graph = RoleGraph::new(members).map_err(|e| field("nodes", e.to_string()))?;
        if graph.role_of(&id) != Some(role) {
            return Err(field("nodes", format!("{id} is listed with a different role")));
        }

        let gateway = raw.gateway.as_deref().map(|g| node_id("gateway", g)).transpose()?;
        let sync_to = raw.sync_to.iter().map(|s| node_id("sync_to", s)).collect::<Result<Vec<_>, _>>()?;
        match role {
            NodeRole::Rural => {
                let Some(g) = &gateway else { return Err(field("gateway", "required for rural nodes")) };
                if graph.role_of(g) != Some(NodeRole::Urban) {
                    return Err(field("gateway", format!("{g} is not an urban node in `nodes`")));
                }
            }
            _ if gateway.is_some() => return Err(field("gateway", "only rural nodes have a gateway")),
            _ => {}
        }
        if role == NodeRole::Mule {
            if raw.listen.is_none() {
                return Err(field("listen", "required for mules"));
            }
            if !raw.sync_to.is_empty() {
                return Err(field("sync_to", "mules hold no content"));
            }
        } else if raw.beacon_listen.is_none() {
            return Err(field("beacon_listen", "required for rural and urban nodes"));
        }

        let corpus = match (role, raw.corpus_backend) {
            (NodeRole::Urban, Some(CorpusBackend::Dir) | None) => match raw.corpus_path {
                Some(p) => Some(CorpusChoice::Dir(p)),
                None => return Err(field("corpus_path", "required for the dir backend")),
            },
            (NodeRole::Urban, Some(CorpusBackend::Synthetic)) => {
                let min_bytes = raw.corpus_min_bytes.unwrap_or(10_000_000);
                let max_bytes = raw.corpus_max_bytes.unwrap_or(30_000_000);
                if min_bytes > max_bytes {
                    return Err(field("corpus_min_bytes", "greater than corpus_max_bytes"));
                }
                Some(CorpusChoice::Synthetic { seed: raw.corpus_seed, min_bytes, max_bytes })
            }
            (_, Some(_)) => return Err(field("corpus_backend", "only urban nodes fetch articles")),
            (_, None) if raw.corpus_path.is_some() => {
                return Err(field("corpus_path", "only urban nodes fetch articles"))
            }
            _ => None,
        };

        let mut session = SessionConfig::default();
        if let Some(c) = raw.chunk_size {
            if c == 0 || c > 512 * 1024 {
                return Err(field("chunk_size", "must be in 1..=524288"));
            }
            session.chunk_size = c;
        }
        if let Some(t) = raw.hello_timeout_ms {
            session.hello_timeout_ms = t;
        }
        if let Some(t) = raw.idle_timeout_ms {
            session.idle_timeout_ms = t;
        }
        if raw.beacon_interval_ms == 0 {
            return Err(field("beacon_interval_ms", "must be > 0"));
        }
        if raw.tick_interval_ms == 0 {
            return Err(field("tick_interval_ms", "must be > 0"));
        }
        if raw.link_rate_bps == Some(0) {
            return Err(field("link_rate_bps", "must be > 0 when set"));
        }
        let mut fetch = GatewayConfig::default();
        if let Some(r) = raw.fetch_max_retries {
            fetch.max_retries = r;
        }
        if let Some(b) = raw.fetch_backoff_ms {
            fetch.backoff_base_ms = b;
        }

        Ok(NodeConfig {
            id,
            role,
            data_dir: raw.data_dir,
            quota_bytes: raw.quota_bytes.unwrap_or(DEFAULT_QUOTA),
            listen: raw.listen,
            beacon_listen: raw.beacon_listen,
            beacon_targets: raw.beacon_targets,
            beacon_interval_ms: raw.beacon_interval_ms,
            beacon_enabled: raw.beacon_enabled,
            api_bind: raw.api_bind,
            gateway,
            sync_to,
            corpus,
            session,
            tick_interval_ms: raw.tick_interval_ms,
            contact_retry_ms: raw.contact_retry_ms,
            link_rate_bps: raw.link_rate_bps,
            request_ttl_ms: raw.request_ttl_s.map_or(DEFAULT_REQUEST_TTL_MS, |s| s * 1000),
            content_ttl_ms: raw.content_ttl_s.map_or(DEFAULT_CONTENT_TTL_MS, |s| s * 1000),
            fetch,
            sync: raw.sync,
            graph,
            addrs,
        })
    }

    pub fn settings(&self) -> NodeSettings {
        let mut s = NodeSettings::new(self.id.clone(), self.role);
        s.gateway = self.gateway.clone();
        s.sync_to = self.sync_to.clone();
        s.session = self.session.clone();
        s.store = StoreConfig { quota: self.quota_bytes, chunk_size: self.session.chunk_size, sync: self.sync };
        s.request_ttl_ms = self.request_ttl_ms;
        s.content_ttl_ms = self.content_ttl_ms;
        s.fetch = self.fetch;
        s
    }

    pub fn addr_of(&self, id: &NodeId) -> Option<SocketAddr> {
        self.addrs.iter().find(|(n, _)| n == id).map(|(_, a)| *a)
    }
}
