//! Content catalog, topic requests and the bundle payload schema.
//!
//! State lives in a directory: `bodies/<content_id>.txt` holds each version's
//! text and `content.jsonl` is an append-only log of metadata records. Each
//! inbound bundle is applied with a single log record, so a crash either
//! applies it entirely or not at all.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::{sha256, BundleId, NodeId, NodeRole};
use crate::codec::PutExt;
use crate::Millis;

pub const SCHEMA_VERSION: u32 = 1;
const LOG_FILE: &str = "content.jsonl";
const BODIES_DIR: &str = "bodies";

#[derive(Debug, thiserror::Error)]
pub enum ContentError {
    #[error("title is empty")]
    EmptyTitle,
    #[error("topic is empty")]
    EmptyTopic,
    #[error("no content titled {0:?}")]
    NotFound(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("content log is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = ContentError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    LocalAuthor,
    FetchedRemote,
}

/// Catalog entry without its body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub content_id: String,
    pub title: String,
    pub version: u32,
    pub origin: Origin,
    pub updated_at: Millis,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentItem {
    #[serde(flatten)]
    pub meta: ItemMeta,
    pub body: String,
}

/// Identifier of one version of a title.
pub fn content_id(title: &str, version: u32) -> String {
    let mut buf = Vec::new();
    buf.put_str(title);
    buf.put_u32(version);
    hex::encode(sha256(&buf))
}

/// Identifier of a topic request.
pub fn request_id(topic: &str, requester: &NodeId, created_at: Millis) -> String {
    let mut buf = Vec::new();
    buf.put_str(topic);
    buf.put_str(requester.as_str());
    buf.put_u64(created_at);
    hex::encode(sha256(&buf))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum RequestStatus {
    PendingPickup,
    InTransit,
    AtGateway,
    Fulfilled,
    Failed(String),
}

impl RequestStatus {
    fn rank(&self) -> u8 {
        match self {
            RequestStatus::PendingPickup => 0,
            RequestStatus::InTransit => 1,
            RequestStatus::AtGateway => 2,
            RequestStatus::Fulfilled | RequestStatus::Failed(_) => 3,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.rank() == 3
    }

    pub fn label(&self) -> &'static str {
        match self {
            RequestStatus::PendingPickup => "pending_pickup",
            RequestStatus::InTransit => "in_transit",
            RequestStatus::AtGateway => "at_gateway",
            RequestStatus::Fulfilled => "fulfilled",
            RequestStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicRequest {
    pub request_id: String,
    pub topic: String,
    pub requester: NodeId,
    pub status: RequestStatus,
    pub created_at: Millis,
    pub resolved_at: Option<Millis>,
    /// Every status this request has held, with the time it was entered.
    pub history: Vec<(RequestStatus, Millis)>,
}

impl TopicRequest {
    /// Moves forward to `to`, recording each skipped intermediate state.
    /// Returns false (and changes nothing) if `to` is not ahead.
    fn advance(&mut self, to: RequestStatus, now: Millis) -> bool {
        if self.status.is_terminal() || to.rank() <= self.status.rank() {
            return false;
        }
        let chain = [RequestStatus::PendingPickup, RequestStatus::InTransit, RequestStatus::AtGateway];
        for step in chain.iter().filter(|s| s.rank() > self.status.rank() && s.rank() < to.rank()) {
            self.history.push((step.clone(), now));
        }
        if to.is_terminal() {
            self.resolved_at = Some(now);
        }
        self.history.push((to.clone(), now));
        self.status = to;
        true
    }
}

/// Bundle payload carried between nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AppMessage {
    TopicRequest {
        request_id: String,
        topic: String,
    },
    ContentUpdate {
        title: String,
        version: u32,
        body: String,
        origin: Origin,
    },
    ContentResponse {
        request_id: String,
        topic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        title: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        body: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    schema: u32,
    #[serde(flatten)]
    msg: &'a AppMessage,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    schema: u32,
    #[serde(flatten)]
    msg: AppMessage,
}

impl AppMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&EnvelopeOut { schema: SCHEMA_VERSION, msg: self }).expect("message serializes")
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let env: EnvelopeIn =
            serde_json::from_slice(bytes).map_err(|e| ContentError::MalformedPayload(e.to_string()))?;
        if env.schema != SCHEMA_VERSION {
            return Err(ContentError::MalformedPayload(format!("unsupported schema {}", env.schema)));
        }
        Ok(env.msg)
    }
}

/// What applying an inbound bundle did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Applied {
    /// This bundle id was applied before; nothing changed.
    Duplicate,
    Quarantined(String),
    /// Urban: a topic request arrived and needs fetching.
    FetchRequested(TopicRequest),
    Content { item: ItemMeta, request: Option<TopicRequest> },
    /// Error response: the matching request failed.
    RequestFailed(TopicRequest),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    Item(ItemMeta),
    Request(TopicRequest),
    /// An inbound bundle and everything it changed.
    Apply {
        bundle: BundleId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        item: Option<ItemMeta>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request: Option<TopicRequest>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        quarantined: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Quarantine {
    pub bundle: BundleId,
    pub reason: String,
}

pub struct ContentService {
    dir: PathBuf,
    sync: bool,
    log: File,
    titles: BTreeMap<String, Vec<ItemMeta>>,
    requests: BTreeMap<String, TopicRequest>,
    applied: BTreeSet<BundleId>,
    quarantined: Vec<Quarantine>,
}

impl std::fmt::Debug for ContentService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContentService")
            .field("dir", &self.dir)
            .field("titles", &self.titles.len())
            .field("requests", &self.requests.len())
            .finish()
    }
}

impl ContentService {
    pub fn open(dir: impl AsRef<Path>, sync: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(BODIES_DIR))?;
        let path = dir.join(LOG_FILE);
        let mut svc = ContentService {
            log: OpenOptions::new().create(true).append(true).open(&path)?,
            dir,
            sync,
            titles: BTreeMap::new(),
            requests: BTreeMap::new(),
            applied: BTreeSet::new(),
            quarantined: Vec::new(),
        };
        let mut good_len = 0u64;
        let mut torn = false;
        for line in BufReader::new(File::open(&path)?).split(b'\n') {
            let line = line?;
            match serde_json::from_slice::<Record>(&line) {
                Ok(rec) => {
                    svc.replay(rec);
                    good_len += line.len() as u64 + 1;
                }
                Err(_) => {
                    torn = true;
                    break;
                }
            }
        }
        if torn {
            tracing::warn!(path = %path.display(), "content log has a torn tail; truncating");
            svc.log.set_len(good_len)?;
        }
        Ok(svc)
    }

    fn replay(&mut self, rec: Record) {
        match rec {
            Record::Item(item) => self.insert_item(item),
            Record::Request(req) => {
                self.requests.insert(req.request_id.clone(), req);
            }
            Record::Apply { bundle, item, request, quarantined } => {
                self.applied.insert(bundle);
                if let Some(item) = item {
                    self.insert_item(item);
                }
                if let Some(req) = request {
                    self.requests.insert(req.request_id.clone(), req);
                }
                if let Some(reason) = quarantined {
                    self.quarantined.push(Quarantine { bundle, reason });
                }
            }
        }
    }

    fn insert_item(&mut self, item: ItemMeta) {
        let versions = self.titles.entry(item.title.clone()).or_default();
        if versions.last().is_none_or(|v| v.version < item.version) {
            versions.push(item);
        }
    }

    fn append(&mut self, rec: &Record) -> Result<()> {
        let mut line = serde_json::to_vec(rec).map_err(|e| ContentError::Corrupt(e.to_string()))?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        if self.sync {
            self.log.sync_data()?;
        }
        Ok(())
    }

    fn body_path(&self, content_id: &str) -> PathBuf {
        self.dir.join(BODIES_DIR).join(format!("{content_id}.txt"))
    }

    /// Writes the body for the next version of `title` and returns its metadata
    /// without recording it.
    fn stage_item(&self, title: &str, body: &str, origin: Origin, now: Millis) -> Result<ItemMeta> {
        let version = self.titles.get(title).and_then(|v| v.last()).map_or(1, |v| v.version + 1);
        let id = content_id(title, version);
        let path = self.body_path(&id);
        let mut f = File::create(&path)?;
        f.write_all(body.as_bytes())?;
        if self.sync {
            f.sync_all()?;
        }
        Ok(ItemMeta {
            content_id: id,
            title: title.to_string(),
            version,
            origin,
            updated_at: now,
            len: body.len() as u64,
        })
    }

    pub fn publish(&mut self, title: &str, body: &str, now: Millis) -> Result<ItemMeta> {
        let title = title.trim();
        if title.is_empty() {
            return Err(ContentError::EmptyTitle);
        }
        let item = self.stage_item(title, body, Origin::LocalAuthor, now)?;
        self.append(&Record::Item(item.clone()))?;
        self.insert_item(item.clone());
        Ok(item)
    }

    /// Opens a request, or returns the open one for the same topic and requester.
    /// The bool is true when a new request was created.
    pub fn request_topic(&mut self, topic: &str, requester: &NodeId, now: Millis) -> Result<(TopicRequest, bool)> {
        let topic = topic.trim();
        if topic.is_empty() {
            return Err(ContentError::EmptyTopic);
        }
        if let Some(open) = self
            .requests
            .values()
            .find(|r| r.topic == topic && &r.requester == requester && !r.status.is_terminal())
        {
            return Ok((open.clone(), false));
        }
        let req = TopicRequest {
            request_id: request_id(topic, requester, now),
            topic: topic.to_string(),
            requester: requester.clone(),
            status: RequestStatus::PendingPickup,
            created_at: now,
            resolved_at: None,
            history: vec![(RequestStatus::PendingPickup, now)],
        };
        self.append(&Record::Request(req.clone()))?;
        self.requests.insert(req.request_id.clone(), req.clone());
        Ok((req, true))
    }

    /// Advances a request's status; no-op (returns None) if it would not move forward.
    pub fn advance_request(&mut self, request_id: &str, to: RequestStatus, now: Millis) -> Result<Option<TopicRequest>> {
        let Some(mut req) = self.requests.get(request_id).cloned() else {
            return Ok(None);
        };
        if !req.advance(to, now) {
            return Ok(None);
        }
        self.append(&Record::Request(req.clone()))?;
        self.requests.insert(req.request_id.clone(), req.clone());
        Ok(Some(req))
    }

    /// Fails open requests older than `ttl`. Returns the ones that changed.
    pub fn expire_requests(&mut self, now: Millis, ttl: Millis) -> Result<Vec<TopicRequest>> {
        let due: Vec<String> = self
            .requests
            .values()
            .filter(|r| !r.status.is_terminal() && r.created_at.saturating_add(ttl) <= now)
            .map(|r| r.request_id.clone())
            .collect();
        let mut out = Vec::new();
        for id in due {
            if let Some(r) = self.advance_request(&id, RequestStatus::Failed("expired".into()), now)? {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Applies a complete inbound bundle addressed to this node.
    pub fn apply_incoming(
        &mut self,
        role: NodeRole,
        bundle: BundleId,
        source: &NodeId,
        payload: &[u8],
        now: Millis,
    ) -> Result<Applied> {
        if self.applied.contains(&bundle) {
            return Ok(Applied::Duplicate);
        }
        let msg = match AppMessage::parse(payload) {
            Ok(m) => m,
            Err(e) => return self.quarantine(bundle, e.to_string()),
        };
        match (role, msg) {
            (NodeRole::Urban, AppMessage::TopicRequest { request_id, topic }) => {
                let topic = topic.trim().to_string();
                if topic.is_empty() {
                    return self.quarantine(bundle, "empty topic".into());
                }
                let req = TopicRequest {
                    request_id,
                    topic,
                    requester: source.clone(),
                    status: RequestStatus::AtGateway,
                    created_at: now,
                    resolved_at: None,
                    history: vec![(RequestStatus::AtGateway, now)],
                };
                if self.requests.contains_key(&req.request_id) {
                    self.commit(bundle, None, None)?;
                    return Ok(Applied::Duplicate);
                }
                self.commit(bundle, None, Some(req.clone()))?;
                Ok(Applied::FetchRequested(req))
            }
            (_, AppMessage::ContentUpdate { title, body, .. }) => {
                let title = title.trim().to_string();
                if title.is_empty() {
                    return self.quarantine(bundle, "empty title".into());
                }
                let item = self.stage_item(&title, &body, Origin::FetchedRemote, now)?;
                self.commit(bundle, Some(item.clone()), None)?;
                Ok(Applied::Content { item, request: None })
            }
            (NodeRole::Rural, AppMessage::ContentResponse { request_id, topic, title, body, error }) => {
                let mut req = self.requests.get(&request_id).cloned();
                if req.is_none() {
                    tracing::warn!(%request_id, %topic, "response for unknown request");
                }
                match (error, title, body) {
                    (Some(reason), _, _) => {
                        let changed = req.as_mut().is_some_and(|r| r.advance(RequestStatus::Failed(reason), now));
                        let req = req.filter(|_| changed);
                        self.commit(bundle, None, req.clone())?;
                        Ok(match req {
                            Some(r) => Applied::RequestFailed(r),
                            None => Applied::Duplicate,
                        })
                    }
                    (None, Some(title), Some(body)) if !title.trim().is_empty() => {
                        let item = self.stage_item(title.trim(), &body, Origin::FetchedRemote, now)?;
                        let changed = req.as_mut().is_some_and(|r| r.advance(RequestStatus::Fulfilled, now));
                        let req = req.filter(|_| changed);
                        self.commit(bundle, Some(item.clone()), req.clone())?;
                        Ok(Applied::Content { item, request: req })
                    }
                    _ => self.quarantine(bundle, "response without content or error".into()),
                }
            }
            (role, msg) => {
                let kind = match msg {
                    AppMessage::TopicRequest { .. } => "topic_request",
                    AppMessage::ContentUpdate { .. } => "content_update",
                    AppMessage::ContentResponse { .. } => "content_response",
                };
                self.quarantine(bundle, format!("{kind} not accepted at a {role} node"))
            }
        }
    }

    fn commit(&mut self, bundle: BundleId, item: Option<ItemMeta>, request: Option<TopicRequest>) -> Result<()> {
        let rec = Record::Apply { bundle, item, request, quarantined: None };
        self.append(&rec)?;
        self.replay(rec);
        Ok(())
    }

    fn quarantine(&mut self, bundle: BundleId, reason: String) -> Result<Applied> {
        tracing::warn!(%bundle, %reason, "quarantining bundle");
        let rec = Record::Apply { bundle, item: None, request: None, quarantined: Some(reason.clone()) };
        self.append(&rec)?;
        self.replay(rec);
        Ok(Applied::Quarantined(reason))
    }

    pub fn is_applied(&self, bundle: &BundleId) -> bool {
        self.applied.contains(bundle)
    }

    /// Latest version of every title, ordered by title.
    pub fn list(&self) -> Vec<ItemMeta> {
        self.titles.values().filter_map(|v| v.last().cloned()).collect()
    }

    pub fn versions(&self, title: &str) -> Vec<ItemMeta> {
        self.titles.get(title).cloned().unwrap_or_default()
    }

    /// The latest version, or a specific one.
    pub fn get(&self, title: &str, version: Option<u32>) -> Result<ContentItem> {
        let versions = self.titles.get(title).ok_or_else(|| ContentError::NotFound(title.to_string()))?;
        let meta = match version {
            None => versions.last(),
            Some(v) => versions.iter().find(|m| m.version == v),
        }
        .ok_or_else(|| ContentError::NotFound(format!("{title} v{}", version.unwrap_or(0))))?;
        let body = fs::read_to_string(self.body_path(&meta.content_id))?;
        Ok(ContentItem { meta: meta.clone(), body })
    }

    pub fn requests(&self) -> impl Iterator<Item = &TopicRequest> {
        self.requests.values()
    }

    pub fn request(&self, request_id: &str) -> Option<&TopicRequest> {
        self.requests.get(request_id)
    }

    pub fn quarantined(&self) -> &[Quarantine] {
        &self.quarantined
    }

    /// Newest `updated_at` over the catalog.
    pub fn latest_update(&self) -> Option<Millis> {
        self.titles.values().flat_map(|v| v.iter().map(|m| m.updated_at)).max()
    }

    /// Serialized catalog and request state, for comparing two services.
    pub fn snapshot(&self) -> String {
        let items: Vec<&ItemMeta> = self.titles.values().flatten().collect();
        let requests: Vec<&TopicRequest> = self.requests.values().collect();
        serde_json::to_string(&(items, requests, &self.quarantined)).expect("snapshot serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn open(dir: &Path) -> ContentService {
        ContentService::open(dir, false).unwrap()
    }

    fn bid(n: u8) -> BundleId {
        BundleId([n; 32])
    }

    fn response(request_id: &str, title: &str, body: &str) -> Vec<u8> {
        AppMessage::ContentResponse {
            request_id: request_id.into(),
            topic: title.into(),
            title: Some(title.into()),
            body: Some(body.into()),
            error: None,
        }
        .to_bytes()
    }

    #[test]
    fn versions_increase_and_old_versions_stay() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        assert_eq!(c.publish("Algebra", "first", 1).unwrap().version, 1);
        assert_eq!(c.publish("  Algebra ", "second", 2).unwrap().version, 2);
        assert_eq!(c.get("Algebra", None).unwrap().body, "second");
        assert_eq!(c.get("Algebra", Some(1)).unwrap().body, "first");
        assert!(matches!(c.get("Algebra", Some(3)), Err(ContentError::NotFound(_))));
        assert!(matches!(c.publish(" ", "x", 3), Err(ContentError::EmptyTitle)));
    }

    #[test]
    fn catalog_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let before = {
            let mut c = open(dir.path());
            c.publish("Algebra", "x = 1", 1).unwrap();
            c.publish("Biology", "cells", 2).unwrap();
            c.request_topic("Photosynthesis", &node("rural-1"), 3).unwrap();
            c.snapshot()
        };
        let c = open(dir.path());
        assert_eq!(c.snapshot(), before);
        assert_eq!(c.get("Biology", None).unwrap().body, "cells");
    }

    #[test]
    fn torn_log_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut c = open(dir.path());
            c.publish("Algebra", "x", 1).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(LOG_FILE)).unwrap();
        f.write_all(b"{\"op\":\"item\",\"tit").unwrap();
        drop(f);
        let mut c = open(dir.path());
        assert_eq!(c.list().len(), 1);
        c.publish("Biology", "y", 2).unwrap();
        let c = open(dir.path());
        assert_eq!(c.list().len(), 2);
    }

    #[test]
    fn list_sorted_by_title() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        assert!(c.list().is_empty());
        for t in ["Zoology", "Algebra", "Music"] {
            c.publish(t, "b", 1).unwrap();
        }
        let titles: Vec<String> = c.list().into_iter().map(|m| m.title).collect();
        assert_eq!(titles, ["Algebra", "Music", "Zoology"]);
    }

    #[test]
    fn request_is_idempotent_while_open() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        let (a, new_a) = c.request_topic("Photosynthesis", &node("rural-1"), 10).unwrap();
        let (b, new_b) = c.request_topic(" Photosynthesis ", &node("rural-1"), 20).unwrap();
        assert!(new_a && !new_b);
        assert_eq!(a.request_id, b.request_id);
        assert_eq!(a.status, RequestStatus::PendingPickup);
        assert!(matches!(c.request_topic("  ", &node("rural-1"), 1), Err(ContentError::EmptyTopic)));
    }

    #[test]
    fn response_fulfills_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        let (req, _) = c.request_topic("Photosynthesis", &node("rural-1"), 10).unwrap();
        c.advance_request(&req.request_id, RequestStatus::InTransit, 20).unwrap();
        let payload = response(&req.request_id, "Photosynthesis", "light");
        let first = c.apply_incoming(NodeRole::Rural, bid(1), &node("urban-1"), &payload, 30).unwrap();
        assert!(matches!(first, Applied::Content { request: Some(_), .. }));
        let snap = c.snapshot();
        let again = c.apply_incoming(NodeRole::Rural, bid(1), &node("urban-1"), &payload, 40).unwrap();
        assert_eq!(again, Applied::Duplicate);
        assert_eq!(c.snapshot(), snap);
        let r = c.request(&req.request_id).unwrap();
        assert_eq!(r.status, RequestStatus::Fulfilled);
        assert_eq!(r.resolved_at, Some(30));
        let states: Vec<&str> = r.history.iter().map(|(s, _)| s.label()).collect();
        assert_eq!(states, ["pending_pickup", "in_transit", "at_gateway", "fulfilled"]);
        assert_eq!(c.versions("Photosynthesis").len(), 1);
        assert_eq!(c.get("Photosynthesis", None).unwrap().meta.origin, Origin::FetchedRemote);
    }

    #[test]
    fn error_response_fails_request() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        let (req, _) = c.request_topic("Nothing", &node("rural-1"), 10).unwrap();
        let payload = AppMessage::ContentResponse {
            request_id: req.request_id.clone(),
            topic: "Nothing".into(),
            title: None,
            body: None,
            error: Some("not_found".into()),
        }
        .to_bytes();
        c.apply_incoming(NodeRole::Rural, bid(2), &node("urban-1"), &payload, 30).unwrap();
        assert_eq!(c.request(&req.request_id).unwrap().status, RequestStatus::Failed("not_found".into()));
        assert!(c.list().is_empty());
    }

    #[test]
    fn unknown_request_still_upserts_content() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        let payload = response("feed", "Geology", "rocks");
        let applied = c.apply_incoming(NodeRole::Rural, bid(3), &node("urban-1"), &payload, 5).unwrap();
        assert!(matches!(applied, Applied::Content { request: None, .. }));
        assert_eq!(c.get("Geology", None).unwrap().body, "rocks");
    }

    #[test]
    fn bogus_type_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        let payload = br#"{"schema":1,"type":"bogus","title":"x"}"#;
        let applied = c.apply_incoming(NodeRole::Rural, bid(4), &node("urban-1"), payload, 5).unwrap();
        assert!(matches!(applied, Applied::Quarantined(_)));
        assert!(c.list().is_empty());
        assert_eq!(c.quarantined().len(), 1);
        assert_eq!(
            c.apply_incoming(NodeRole::Rural, bid(4), &node("urban-1"), payload, 6).unwrap(),
            Applied::Duplicate
        );
        let c = open(dir.path());
        assert_eq!(c.quarantined().len(), 1);
    }

    #[test]
    fn urban_turns_request_into_fetch() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        let payload = AppMessage::TopicRequest { request_id: "r1".into(), topic: "Photosynthesis".into() }.to_bytes();
        let applied = c.apply_incoming(NodeRole::Urban, bid(5), &node("rural-1"), &payload, 5).unwrap();
        let Applied::FetchRequested(req) = applied else { panic!("{applied:?}") };
        assert_eq!(req.requester, node("rural-1"));
        assert_eq!(req.status, RequestStatus::AtGateway);
    }

    #[test]
    fn messages_round_trip_with_schema() {
        let msgs = [
            AppMessage::TopicRequest { request_id: "a".into(), topic: "t".into() },
            AppMessage::ContentUpdate { title: "T".into(), version: 3, body: "b\n\"q\"".into(), origin: Origin::LocalAuthor },
            AppMessage::ContentResponse { request_id: "a".into(), topic: "t".into(), title: None, body: None, error: Some("unreachable".into()) },
        ];
        for m in msgs {
            let bytes = m.to_bytes();
            let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            assert_eq!(v["schema"], 1);
            assert_eq!(AppMessage::parse(&bytes).unwrap(), m);
        }
        assert!(AppMessage::parse(br#"{"schema":2,"type":"topic_request","request_id":"a","topic":"t"}"#).is_err());
        assert!(AppMessage::parse(br#"{"type":"topic_request","request_id":"a","topic":"t"}"#).is_err());
    }

    #[test]
    fn status_only_moves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = open(dir.path());
        let (req, _) = c.request_topic("X", &node("rural-1"), 0).unwrap();
        assert!(c.advance_request(&req.request_id, RequestStatus::InTransit, 1).unwrap().is_some());
        assert!(c.advance_request(&req.request_id, RequestStatus::PendingPickup, 2).unwrap().is_none());
        assert!(c.advance_request(&req.request_id, RequestStatus::InTransit, 2).unwrap().is_none());
        assert_eq!(c.expire_requests(99, 100).unwrap().len(), 0);
        assert_eq!(c.expire_requests(100, 100).unwrap().len(), 1);
        assert!(c.advance_request(&req.request_id, RequestStatus::Fulfilled, 200).unwrap().is_none());
    }
}
