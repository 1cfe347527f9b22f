//! A node: bundle store plus the services its role runs, driven by contacts
//! and clock ticks. The simulator and the daemon both use this type.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::bundle::{Bundle, BundleError, BundleId, BundleKind, BundleLimits, NodeId, NodeRole};
use crate::content::{AppMessage, Applied, ContentError, ContentService, ItemMeta, RequestStatus, TopicRequest};
use crate::gateway::{ArticleSource, FetchJob, Gateway, GatewayConfig};
use crate::proto::link::{apply_with, Applied as LinkApplied, Endpoint};
use crate::proto::session::{AbortReason, Action, ChunkSource, LocalView, Session, SessionConfig};
use crate::routing::{Peer, RoleGraph};
use crate::store::{BundleStore, EntryState, PutOutcome, StoreConfig, StoreError};
use crate::Millis;

pub const DEFAULT_REQUEST_TTL_MS: Millis = 3 * 24 * 3600 * 1000;
pub const DEFAULT_CONTENT_TTL_MS: Millis = crate::bundle::DEFAULT_TTL_MS;

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no gateway configured for topic requests")]
    NoGateway,
    #[error("{0} nodes do not run the content service")]
    NoContent(NodeRole),
    #[error("urban node has no article source")]
    NoSource,
}

pub type Result<T, E = NodeError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct NodeSettings {
    pub id: NodeId,
    pub role: NodeRole,
    /// Destination of topic requests (rural nodes).
    pub gateway: Option<NodeId>,
    /// Nodes that receive a content update for every local publish.
    pub sync_to: Vec<NodeId>,
    pub session: SessionConfig,
    pub store: StoreConfig,
    pub request_ttl_ms: Millis,
    pub content_ttl_ms: Millis,
    pub fetch: GatewayConfig,
}

impl NodeSettings {
    pub fn new(id: NodeId, role: NodeRole) -> Self {
        NodeSettings {
            id,
            role,
            gateway: None,
            sync_to: Vec::new(),
            session: SessionConfig::default(),
            store: StoreConfig::default(),
            request_ttl_ms: DEFAULT_REQUEST_TTL_MS,
            content_ttl_ms: DEFAULT_CONTENT_TTL_MS,
            fetch: GatewayConfig::default(),
        }
    }
}

/// Something that happened at a node, for logs and metrics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NodeEvent {
    BundleCreated { id: BundleId, kind: BundleKind, destination: NodeId, len: u64 },
    BundleCompleted { id: BundleId, from: Option<NodeId>, kind: BundleKind, destination: NodeId },
    BundleDelivered { id: BundleId, kind: BundleKind, source: NodeId },
    CustodyReleased { id: BundleId, to: Option<NodeId> },
    BundleExpired { id: BundleId },
    Quarantined { id: BundleId, reason: String },
    ContentApplied { title: String, version: u32, origin: crate::content::Origin },
    RequestStatus { request_id: String, topic: String, status: RequestStatus },
    FetchQueued { request_id: String, topic: String },
    SessionClosed {
        peer: Option<NodeId>,
        outcome: String,
        completed: usize,
        resumed: Vec<(BundleId, u64)>,
        bytes_sent: u64,
        bytes_received: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StoreStatus {
    pub bundles: usize,
    pub partial: usize,
    pub used_bytes: u64,
    pub quota_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PendingCounts {
    /// Complete bundles waiting to be forwarded.
    pub outbound: usize,
    pub topic_requests: usize,
    pub content_updates: usize,
    pub content_responses: usize,
    /// Open fetch jobs (urban).
    pub fetch_jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PeerSeen {
    pub peer: NodeId,
    pub at: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeStatus {
    pub node: NodeId,
    pub role: NodeRole,
    pub peer_last_seen: Option<PeerSeen>,
    pub store: StoreStatus,
    pub pending: PendingCounts,
}

pub struct Node {
    settings: NodeSettings,
    me: Peer,
    graph: Arc<RoleGraph>,
    store: BundleStore,
    content: Option<ContentService>,
    gateway: Option<Gateway>,
    source: Option<Box<dyn ArticleSource>>,
    events: Vec<(Millis, NodeEvent)>,
    peer_last_seen: Option<PeerSeen>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("me", &self.me).field("store", &self.store).finish()
    }
}

impl Node {
    /// Opens (or creates) the node's state under `dir` and finishes any
    /// delivery interrupted by a crash.
    pub fn open(
        dir: impl AsRef<Path>,
        settings: NodeSettings,
        graph: Arc<RoleGraph>,
        source: Option<Box<dyn ArticleSource>>,
        now: Millis,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let sync = settings.store.sync;
        // chunks arrive aligned to the session chunk size
        let store_cfg = StoreConfig { chunk_size: settings.session.chunk_size, ..settings.store.clone() };
        let store = BundleStore::open(dir.join("store"), store_cfg)?;
        let content = match settings.role {
            NodeRole::Mule => None,
            _ => Some(ContentService::open(dir.join("content"), sync)?),
        };
        let gateway = match settings.role {
            NodeRole::Urban => Some(Gateway::open(dir.join("gateway"), settings.fetch, sync)?),
            _ => None,
        };
        if settings.role == NodeRole::Urban && source.is_none() {
            return Err(NodeError::NoSource);
        }
        let me = Peer::new(settings.id.clone(), settings.role);
        let mut node = Node {
            settings,
            me,
            graph,
            store,
            content,
            gateway,
            source,
            events: Vec::new(),
            peer_last_seen: None,
        };
        node.recover(now)?;
        Ok(node)
    }

    fn recover(&mut self, now: Millis) -> Result<()> {
        let mine: Vec<BundleId> = self
            .store
            .entries()
            .filter(|e| e.meta.destination == self.me.id && e.state == EntryState::Complete)
            .map(|e| e.meta.id)
            .collect();
        for id in mine {
            self.deliver(&id, now)?;
        }
        if let (Some(content), Some(gateway)) = (&self.content, &mut self.gateway) {
            for r in content.requests().filter(|r| r.status == RequestStatus::AtGateway) {
                if !gateway.has_job(&r.request_id) {
                    let job = FetchJob::new(r.request_id.clone(), r.topic.clone(), r.requester.clone(), r.created_at);
                    gateway.enqueue(job)?;
                }
            }
        }
        if let Some(content) = &self.content {
            let pending: Vec<TopicRequest> = content
                .requests()
                .filter(|r| r.status == RequestStatus::PendingPickup && r.requester == self.me.id)
                .cloned()
                .collect();
            for r in pending {
                self.emit_request_bundle(&r, now)?;
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &NodeId {
        &self.me.id
    }

    pub fn role(&self) -> NodeRole {
        self.me.role
    }

    pub fn peer(&self) -> &Peer {
        &self.me
    }

    pub fn settings(&self) -> &NodeSettings {
        &self.settings
    }

    pub fn graph(&self) -> &Arc<RoleGraph> {
        &self.graph
    }

    pub fn store(&self) -> &BundleStore {
        &self.store
    }

    pub fn content(&self) -> Option<&ContentService> {
        self.content.as_ref()
    }

    pub fn gateway(&self) -> Option<&Gateway> {
        self.gateway.as_ref()
    }

    pub fn take_events(&mut self) -> Vec<(Millis, NodeEvent)> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, at: Millis, ev: NodeEvent) {
        tracing::debug!(node = %self.me.id, at, event = ?ev, "node event");
        self.events.push((at, ev));
    }

    fn content_mut(&mut self) -> Result<&mut ContentService> {
        let role = self.me.role;
        self.content.as_mut().ok_or(NodeError::NoContent(role))
    }

    /// Creates and stores a bundle from this node.
    fn originate(
        &mut self,
        destination: &NodeId,
        kind: BundleKind,
        payload: Vec<u8>,
        ttl: Millis,
        created_at: Millis,
        now: Millis,
    ) -> Result<BundleId> {
        let limits = BundleLimits::default();
        let b = Bundle::create(
            self.me.id.clone(),
            destination.clone(),
            kind,
            kind.default_priority(),
            payload,
            ttl,
            created_at,
            &limits,
        )?;
        let id = b.id();
        if self.store.put(&b, now, None)? == PutOutcome::Inserted {
            self.emit(
                now,
                NodeEvent::BundleCreated { id, kind, destination: destination.clone(), len: b.meta.payload_len },
            );
        }
        Ok(id)
    }

    fn emit_request_bundle(&mut self, r: &TopicRequest, now: Millis) -> Result<BundleId> {
        let gateway = self.settings.gateway.clone().ok_or(NodeError::NoGateway)?;
        let payload = AppMessage::TopicRequest { request_id: r.request_id.clone(), topic: r.topic.clone() }.to_bytes();
        let ttl = self.settings.request_ttl_ms;
        self.originate(&gateway, BundleKind::TopicRequest, payload, ttl, r.created_at, now)
    }

    /// Publishes a new version locally and queues an update to each sync target.
    pub fn publish(&mut self, title: &str, body: &str, now: Millis) -> Result<ItemMeta> {
        let item = self.content_mut()?.publish(title, body, now)?;
        self.emit(
            now,
            NodeEvent::ContentApplied { title: item.title.clone(), version: item.version, origin: item.origin },
        );
        let targets = self.settings.sync_to.clone();
        for t in targets {
            let msg = AppMessage::ContentUpdate {
                title: item.title.clone(),
                version: item.version,
                body: body.to_string(),
                origin: item.origin,
            };
            let ttl = self.settings.content_ttl_ms;
            self.originate(&t, BundleKind::ContentUpdate, msg.to_bytes(), ttl, now, now)?;
        }
        Ok(item)
    }

    /// Opens a topic request (or returns the open one) and queues its bundle.
    pub fn request_topic(&mut self, topic: &str, now: Millis) -> Result<TopicRequest> {
        if self.settings.gateway.is_none() {
            return Err(NodeError::NoGateway);
        }
        let me = self.me.id.clone();
        let (req, created) = self.content_mut()?.request_topic(topic, &me, now)?;
        if created {
            self.emit(
                now,
                NodeEvent::RequestStatus {
                    request_id: req.request_id.clone(),
                    topic: req.topic.clone(),
                    status: req.status.clone(),
                },
            );
            self.emit_request_bundle(&req, now)?;
        }
        Ok(req)
    }

    /// Snapshot for a new contact session.
    pub fn begin_session(&mut self, now: Millis) -> Session {
        let view = LocalView::from_store(self.me.clone(), self.graph.clone(), &self.store, now);
        Session::new(view, self.settings.session.clone())
    }

    pub fn note_peer(&mut self, peer: &NodeId, now: Millis) {
        self.peer_last_seen = Some(PeerSeen { peer: peer.clone(), at: now });
    }

    /// Records how a session ended.
    pub fn session_closed(&mut self, session: &Session, now: Millis) {
        if let Some(p) = session.peer() {
            self.note_peer(&p.id.clone(), now);
        }
        let outcome = match session.abort_reason() {
            None => "done".to_string(),
            Some(AbortReason::LinkDown) => "link_down".into(),
            Some(AbortReason::HelloTimeout) => "hello_timeout".into(),
            Some(AbortReason::IdleTimeout) => "idle_timeout".into(),
            Some(AbortReason::ProtocolViolation(m)) => format!("protocol_violation: {m}"),
            Some(AbortReason::Local(m)) => format!("local: {m}"),
        };
        self.emit(
            now,
            NodeEvent::SessionClosed {
                peer: session.peer().map(|p| p.id.clone()),
                outcome,
                completed: session.completed().len(),
                resumed: session.resumed().to_vec(),
                bytes_sent: session.bytes_sent(),
                bytes_received: session.bytes_received(),
            },
        );
    }

    fn apply_action(&mut self, session: &Session, now: Millis, action: Action) -> Result<()> {
        match action {
            Action::StoreChunk { id, offset, data } => {
                if !self.store.contains(&id) {
                    let meta = session
                        .incoming_meta(&id)
                        .ok_or_else(|| StoreError::InvalidBundle(format!("no metadata for {id}")))?
                        .clone();
                    let from = session.peer().map(|p| p.id.clone());
                    self.store.begin_partial(&meta, now, from.as_ref())?;
                }
                self.store.write_chunk(&id, offset, &data)?;
            }
            Action::CompleteBundle(id) => {
                self.store.complete(&id)?;
                let meta = self.store.get(&id).ok_or(StoreError::NotFound(id))?.meta.clone();
                self.emit(
                    now,
                    NodeEvent::BundleCompleted {
                        id,
                        from: session.peer().map(|p| p.id.clone()),
                        kind: meta.kind,
                        destination: meta.destination.clone(),
                    },
                );
                if meta.destination == self.me.id {
                    self.deliver(&id, now)?;
                }
            }
            Action::DeleteAfterCustody(id) => {
                self.release_custody(&id, session.peer().map(|p| p.id.clone()), now)?;
            }
            Action::SendFrame(_) | Action::CloseLink => {}
        }
        Ok(())
    }

    fn release_custody(&mut self, id: &BundleId, to: Option<NodeId>, now: Millis) -> Result<()> {
        let Some(entry) = self.store.get(id) else { return Ok(()) };
        let meta = entry.meta.clone();
        if meta.kind == BundleKind::TopicRequest && meta.source == self.me.id && self.content.is_some() {
            if let Ok(AppMessage::TopicRequest { request_id, .. }) = AppMessage::parse(&self.store.read_payload(id)?) {
                if let Some(r) = self.content_mut()?.advance_request(&request_id, RequestStatus::InTransit, now)? {
                    self.emit(now, NodeEvent::RequestStatus { request_id, topic: r.topic, status: r.status });
                }
            }
        }
        self.store.release(id)?;
        self.emit(now, NodeEvent::CustodyReleased { id: *id, to });
        Ok(())
    }

    /// Hands a complete bundle addressed to us to the role's service, then
    /// drops the payload and keeps a tombstone. Quarantined bundles are kept.
    fn deliver(&mut self, id: &BundleId, now: Millis) -> Result<()> {
        let bundle = self.store.load(id)?;
        let role = self.me.role;
        let source = bundle.meta.source.clone();
        let Some(content) = self.content.as_mut() else {
            tracing::warn!(bundle = %id, "bundle addressed to a mule; dropping");
            self.store.release(id)?;
            return Ok(());
        };
        let applied = content.apply_incoming(role, *id, &source, &bundle.payload, now)?;
        let mut quarantined = false;
        match applied {
            Applied::Duplicate => {}
            Applied::Quarantined(reason) => {
                quarantined = true;
                self.emit(now, NodeEvent::Quarantined { id: *id, reason });
            }
            Applied::FetchRequested(req) => {
                let job = FetchJob::new(req.request_id.clone(), req.topic.clone(), req.requester.clone(), now);
                if let Some(g) = self.gateway.as_mut() {
                    g.enqueue(job)?;
                }
                self.emit(now, NodeEvent::FetchQueued { request_id: req.request_id, topic: req.topic });
            }
            Applied::Content { item, request } => {
                self.emit(
                    now,
                    NodeEvent::ContentApplied { title: item.title, version: item.version, origin: item.origin },
                );
                if let Some(r) = request {
                    self.emit(
                        now,
                        NodeEvent::RequestStatus { request_id: r.request_id, topic: r.topic, status: r.status },
                    );
                }
            }
            Applied::RequestFailed(r) => {
                self.emit(now, NodeEvent::RequestStatus { request_id: r.request_id, topic: r.topic, status: r.status });
            }
        }
        let quarantined = quarantined || content_quarantined(self.content.as_ref(), id);
        if !quarantined {
            self.emit(now, NodeEvent::BundleDelivered { id: *id, kind: bundle.meta.kind, source });
            self.store.release(id)?;
        }
        Ok(())
    }

    /// Periodic work: expiry and due fetch jobs. Returns when the node next
    /// needs a tick for a scheduled retry.
    pub fn tick(&mut self, now: Millis) -> Result<Option<Millis>> {
        for id in self.store.expire_bundles(now)? {
            self.emit(now, NodeEvent::BundleExpired { id });
        }
        if self.me.role == NodeRole::Rural {
            let ttl = self.settings.request_ttl_ms;
            if let Some(content) = self.content.as_mut() {
                for r in content.expire_requests(now, ttl)? {
                    self.emit(now, NodeEvent::RequestStatus { request_id: r.request_id, topic: r.topic, status: r.status });
                }
            }
        }
        if let (Some(gateway), Some(source)) = (self.gateway.as_mut(), self.source.as_mut()) {
            let outbound = gateway.run_due(now, source.as_mut())?;
            for o in outbound {
                let status = match &o.message {
                    AppMessage::ContentResponse { error: Some(e), .. } => RequestStatus::Failed(e.clone()),
                    _ => RequestStatus::Fulfilled,
                };
                let ttl = self.settings.content_ttl_ms;
                let stored = self.originate(
                    &o.job.requester,
                    BundleKind::ContentResponse,
                    o.message.to_bytes(),
                    ttl,
                    o.created_at,
                    now,
                );
                if let Err(e) = stored {
                    // keep the job; it is retried on the next tick
                    tracing::warn!(request = %o.job.request_id, error = %e, "could not store response");
                    continue;
                }
                if let Some(r) = self.content_mut()?.advance_request(&o.job.request_id, status, now)? {
                    self.emit(now, NodeEvent::RequestStatus { request_id: r.request_id, topic: r.topic, status: r.status });
                }
                if let Some(g) = self.gateway.as_mut() {
                    g.finish(&o.job)?;
                }
            }
        }
        Ok(self.gateway.as_ref().and_then(|g| g.next_due()).filter(|&t| t > now))
    }

    pub fn status(&self) -> NodeStatus {
        let mut pending = PendingCounts {
            outbound: 0,
            topic_requests: 0,
            content_updates: 0,
            content_responses: 0,
            fetch_jobs: self.gateway.as_ref().map_or(0, |g| g.jobs().count()),
        };
        let mut partial = 0;
        for e in self.store.entries() {
            if !e.is_complete() {
                partial += 1;
                continue;
            }
            if e.meta.destination == self.me.id {
                continue;
            }
            pending.outbound += 1;
            match e.meta.kind {
                BundleKind::TopicRequest => pending.topic_requests += 1,
                BundleKind::ContentUpdate => pending.content_updates += 1,
                BundleKind::ContentResponse => pending.content_responses += 1,
            }
        }
        NodeStatus {
            node: self.me.id.clone(),
            role: self.me.role,
            peer_last_seen: self.peer_last_seen.clone(),
            store: StoreStatus {
                bundles: self.store.len(),
                partial,
                used_bytes: self.store.used_bytes(),
                quota_bytes: self.store.config().quota,
            },
            pending,
        }
    }
}

fn content_quarantined(content: Option<&ContentService>, id: &BundleId) -> bool {
    content.is_some_and(|c| c.quarantined().iter().any(|q| &q.bundle == id))
}

impl Endpoint for Node {
    fn chunk_source(&self) -> &dyn ChunkSource {
        &self.store
    }

    fn apply(&mut self, session: &mut Session, now: Millis, actions: Vec<Action>) -> LinkApplied {
        apply_with(session, actions, |s, a| self.apply_action(s, now, a).map_err(|e| e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::SyntheticSource;
    use crate::proto::link::run_budgeted_contact;
    use crate::proto::Frame;

    fn n(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn graph() -> Arc<RoleGraph> {
        Arc::new(
            RoleGraph::new([
                (n("rural-1"), NodeRole::Rural),
                (n("mule-1"), NodeRole::Mule),
                (n("urban-1"), NodeRole::Urban),
            ])
            .unwrap(),
        )
    }

    fn settings(id: &str, role: NodeRole) -> NodeSettings {
        let mut s = NodeSettings::new(n(id), role);
        s.store.sync = false;
        s.session.chunk_size = 4096;
        if role == NodeRole::Rural {
            s.gateway = Some(n("urban-1"));
        }
        s
    }

    struct Trio {
        _dir: tempfile::TempDir,
        rural: Node,
        mule: Node,
        urban: Node,
    }

    fn trio(article: usize) -> Trio {
        let dir = tempfile::tempdir().unwrap();
        let src = SyntheticSource { seed: 1, min_len: article, max_len: article };
        let rural = Node::open(dir.path().join("r"), settings("rural-1", NodeRole::Rural), graph(), None, 0).unwrap();
        let mule = Node::open(dir.path().join("m"), settings("mule-1", NodeRole::Mule), graph(), None, 0).unwrap();
        let urban = Node::open(
            dir.path().join("u"),
            settings("urban-1", NodeRole::Urban),
            graph(),
            Some(Box::new(src)),
            0,
        )
        .unwrap();
        Trio { _dir: dir, rural, mule, urban }
    }

    fn contact(stop: &mut Node, mule: &mut Node, budget: u64, now: Millis) {
        let mut ss = stop.begin_session(now);
        let mut sm = mule.begin_session(now);
        let beacon = Frame::Beacon { node: mule.id().clone(), role: NodeRole::Mule };
        run_budgeted_contact(stop, &mut ss, mule, &mut sm, Some(beacon), budget, now);
        stop.session_closed(&ss, now);
        mule.session_closed(&sm, now);
        stop.tick(now).unwrap();
        mule.tick(now).unwrap();
    }

    #[test]
    fn request_round_trip_through_mule() {
        let mut t = trio(50_000);
        let req = t.rural.request_topic("Photosynthesis", 10).unwrap();
        assert_eq!(t.rural.status().pending.topic_requests, 1);
        contact(&mut t.rural, &mut t.mule, u64::MAX, 100);
        let r = t.rural.content().unwrap().request(&req.request_id).unwrap().clone();
        assert_eq!(r.status, RequestStatus::InTransit);
        contact(&mut t.urban, &mut t.mule, u64::MAX, 200);
        assert_eq!(t.urban.status().pending.content_responses, 1);
        // the response does not ride the contact that delivered the request
        assert_eq!(t.mule.store().len(), 0);
        contact(&mut t.urban, &mut t.mule, u64::MAX, 300);
        contact(&mut t.rural, &mut t.mule, u64::MAX, 400);
        let r = t.rural.content().unwrap().request(&req.request_id).unwrap().clone();
        assert_eq!(r.status, RequestStatus::Fulfilled);
        assert_eq!(r.resolved_at, Some(400));
        let item = t.rural.content().unwrap().get("Photosynthesis", None).unwrap();
        assert!(item.body.len() >= 49_000);
        assert_eq!(t.rural.store().len(), 0);
        assert_eq!(t.mule.store().len(), 0);
        assert_eq!(t.urban.store().len(), 0);
        assert!(t.rural.status().peer_last_seen.is_some());
    }

    #[test]
    fn duplicate_request_queues_one_bundle() {
        let mut t = trio(1000);
        let a = t.rural.request_topic("Photosynthesis", 10).unwrap();
        let b = t.rural.request_topic("Photosynthesis", 20).unwrap();
        assert_eq!(a.request_id, b.request_id);
        assert_eq!(t.rural.store().len(), 1);
    }

    #[test]
    fn publish_syncs_update_to_target() {
        let mut t = trio(1000);
        let mut s = settings("rural-1", NodeRole::Rural);
        s.sync_to = vec![n("urban-1")];
        let dir = tempfile::tempdir().unwrap();
        let mut rural = Node::open(dir.path(), s, graph(), None, 0).unwrap();
        rural.publish("Algebra", "x + y", 5).unwrap();
        contact(&mut rural, &mut t.mule, u64::MAX, 10);
        contact(&mut t.urban, &mut t.mule, u64::MAX, 20);
        assert_eq!(t.urban.content().unwrap().get("Algebra", None).unwrap().body, "x + y");
    }

    #[test]
    fn request_survives_restart_before_bundle_stored() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut rural = Node::open(dir.path(), settings("rural-1", NodeRole::Rural), graph(), None, 0).unwrap();
            let req = rural.request_topic("Rivers", 10).unwrap();
            let id = rural.store().entries().next().unwrap().meta.id;
            rural.store.remove(&id).unwrap();
            assert_eq!(req.status, RequestStatus::PendingPickup);
            id
        };
        let rural = Node::open(dir.path(), settings("rural-1", NodeRole::Rural), graph(), None, 50).unwrap();
        assert!(rural.store().contains(&id));
    }

    #[test]
    fn unknown_topic_fails_request() {
        struct Empty;
        impl ArticleSource for Empty {
            fn lookup(&mut self, _: &str) -> Result<crate::gateway::Article, crate::gateway::LookupError> {
                Err(crate::gateway::LookupError::NotFound)
            }
        }
        let mut t = trio(10);
        let dir = tempfile::tempdir().unwrap();
        t.urban = Node::open(dir.path(), settings("urban-1", NodeRole::Urban), graph(), Some(Box::new(Empty)), 0).unwrap();
        let req = t.rural.request_topic("Nothing", 0).unwrap();
        contact(&mut t.rural, &mut t.mule, u64::MAX, 1);
        contact(&mut t.urban, &mut t.mule, u64::MAX, 2);
        contact(&mut t.urban, &mut t.mule, u64::MAX, 3);
        contact(&mut t.rural, &mut t.mule, u64::MAX, 4);
        let r = t.rural.content().unwrap().request(&req.request_id).unwrap();
        assert_eq!(r.status, RequestStatus::Failed("not_found".into()));
    }

    #[test]
    fn request_expires_without_response() {
        let mut t = trio(10);
        let req = t.rural.request_topic("Slow", 0).unwrap();
        t.rural.tick(DEFAULT_REQUEST_TTL_MS - 1).unwrap();
        assert_eq!(t.rural.content().unwrap().request(&req.request_id).unwrap().status, RequestStatus::PendingPickup);
        t.rural.tick(DEFAULT_REQUEST_TTL_MS).unwrap();
        let r = t.rural.content().unwrap().request(&req.request_id).unwrap();
        assert_eq!(r.status, RequestStatus::Failed("expired".into()));
        assert_eq!(t.rural.store().len(), 0);
    }
}
