//! Bundles: the unit of store-carry-forward data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Millis;

/// Maximum length of a node identifier in bytes.
pub const MAX_NODE_ID_LEN: usize = 64;

/// Default bundle lifetime: 7 days.
pub const DEFAULT_TTL_MS: Millis = 7 * 24 * 3600 * 1000;

/// Default maximum payload size: 64 MiB.
pub const DEFAULT_MAX_PAYLOAD: u64 = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BundleError {
    #[error("ttl must be greater than zero")]
    ZeroTtl,
    #[error("payload of {len} bytes exceeds the configured maximum of {max}")]
    OversizePayload { len: u64, max: u64 },
    #[error("payload must not be empty for {0:?} bundles")]
    EmptyPayload(BundleKind),
    #[error("invalid node id: {0}")]
    InvalidNodeId(String),
}

/// A node identifier: nonempty UTF-8, at most 64 bytes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, BundleError> {
        let id = id.into();
        if id.is_empty() || id.len() > MAX_NODE_ID_LEN {
            return Err(BundleError::InvalidNodeId(id));
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = BundleError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        NodeId::new(value)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.0
    }
}

impl FromStr for NodeId {
    type Err = BundleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// The part a node plays in the rural-mule-urban line topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Rural,
    Mule,
    Urban,
}

impl NodeRole {
    pub fn to_byte(self) -> u8 {
        match self {
            NodeRole::Rural => 0,
            NodeRole::Mule => 1,
            NodeRole::Urban => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(NodeRole::Rural),
            1 => Some(NodeRole::Mule),
            2 => Some(NodeRole::Urban),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Rural => "rural",
            NodeRole::Mule => "mule",
            NodeRole::Urban => "urban",
        }
    }
}

impl FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rural" => Ok(NodeRole::Rural),
            "mule" => Ok(NodeRole::Mule),
            "urban" => Ok(NodeRole::Urban),
            other => Err(format!("unknown role {other:?} (expected rural, mule or urban)")),
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Forwarding priority. `Control` always sorts ahead of `Content`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Content = 0,
    Control = 1,
}

impl Priority {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Priority::Content),
            1 => Some(Priority::Control),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    TopicRequest = 0,
    ContentUpdate = 1,
    ContentResponse = 2,
}

impl BundleKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(BundleKind::TopicRequest),
            1 => Some(BundleKind::ContentUpdate),
            2 => Some(BundleKind::ContentResponse),
            _ => None,
        }
    }

    /// Topic requests ride at control priority, everything else is content.
    pub fn default_priority(self) -> Priority {
        match self {
            BundleKind::TopicRequest => Priority::Control,
            _ => Priority::Content,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BundleKind::TopicRequest => "topic_request",
            BundleKind::ContentUpdate => "content_update",
            BundleKind::ContentResponse => "content_response",
        }
    }
}

/// 32-byte content identifier of a bundle.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BundleId(pub [u8; 32]);

impl BundleId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(BundleId(out))
    }

    /// Derives the id from the identifying fields.
    ///
    /// Strings are length-prefixed (u16 LE) so that no two distinct
    /// (source, destination) pairs can produce the same byte stream.
    pub fn derive(
        source: &NodeId,
        destination: &NodeId,
        created_at: Millis,
        payload_digest: &[u8; 32],
    ) -> Self {
        let mut h = Sha256::new();
        for s in [source.as_str(), destination.as_str()] {
            h.update((s.len() as u16).to_le_bytes());
            h.update(s.as_bytes());
        }
        h.update(created_at.to_le_bytes());
        h.update(payload_digest);
        BundleId(h.finalize().into())
    }
}

impl fmt::Debug for BundleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BundleId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for BundleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for BundleId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BundleId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BundleId::from_hex(&s).ok_or_else(|| serde::de::Error::custom("invalid bundle id"))
    }
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Everything about a bundle except its payload bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub id: BundleId,
    pub source: NodeId,
    pub destination: NodeId,
    pub created_at: Millis,
    pub ttl: Millis,
    pub priority: Priority,
    pub kind: BundleKind,
    pub payload_len: u64,
    pub payload_digest: [u8; 32],
}

impl BundleMeta {
    pub fn expires_at(&self) -> Millis {
        self.created_at.saturating_add(self.ttl)
    }

    /// Expiry is inclusive: a bundle is dead once `created_at + ttl <= now`.
    pub fn is_expired(&self, now: Millis) -> bool {
        self.expires_at() <= now
    }

    /// Recomputes the id from the identifying fields.
    pub fn id_matches(&self) -> bool {
        BundleId::derive(&self.source, &self.destination, self.created_at, &self.payload_digest)
            == self.id
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Bundle {
    pub meta: BundleMeta,
    pub payload: Vec<u8>,
}

impl fmt::Debug for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bundle")
            .field("meta", &self.meta)
            .field("payload", &format_args!("<{} bytes>", self.payload.len()))
            .finish()
    }
}

#[derive(Clone, Debug)]
pub struct BundleLimits {
    pub max_payload: u64,
}

impl Default for BundleLimits {
    fn default() -> Self {
        BundleLimits { max_payload: DEFAULT_MAX_PAYLOAD }
    }
}

impl Bundle {
    /// Builds a bundle with a content-derived id. Pure and deterministic.
    #[allow(clippy::too_many_arguments)]
    pub fn create(
        source: NodeId,
        destination: NodeId,
        kind: BundleKind,
        priority: Priority,
        payload: Vec<u8>,
        ttl: Millis,
        now: Millis,
        limits: &BundleLimits,
    ) -> Result<Bundle, BundleError> {
        if ttl == 0 {
            return Err(BundleError::ZeroTtl);
        }
        let len = payload.len() as u64;
        if len > limits.max_payload {
            return Err(BundleError::OversizePayload { len, max: limits.max_payload });
        }
        if payload.is_empty() && kind != BundleKind::TopicRequest {
            return Err(BundleError::EmptyPayload(kind));
        }
        let payload_digest = sha256(&payload);
        let id = BundleId::derive(&source, &destination, now, &payload_digest);
        Ok(Bundle {
            meta: BundleMeta {
                id,
                source,
                destination,
                created_at: now,
                ttl,
                priority,
                kind,
                payload_len: len,
                payload_digest,
            },
            payload,
        })
    }

    pub fn id(&self) -> BundleId {
        self.meta.id
    }

    /// Checks the structural invariants: id derivation, length and digest.
    pub fn verify(&self) -> bool {
        self.meta.ttl > 0
            && self.meta.payload_len == self.payload.len() as u64
            && sha256(&self.payload) == self.meta.payload_digest
            && self.meta.id_matches()
    }
}
