//! Per-contact session state machine.
//!
//! Both sides send HELLO on link-up, then MANIFEST (bundles offered to the
//! peer), then WANT (for each accepted offer: the offset to resume from).
//! Chunks then flow one per turn. The initiator takes the first turn; a turn
//! is passed by sending a CHUNK (the peer ACKs it and takes the next turn) or
//! an ACK with the pass flag. A side that is handed the turn with nothing
//! left to send says BYE.
//!
//! `Session::step` never performs I/O other than reading outgoing chunk bytes
//! through [`ChunkSource`]; effects are returned as [`Action`]s for the
//! driver to apply in order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::bundle::{BundleId, BundleMeta};
use crate::proto::frame::{AckEntry, Frame, ManifestEntry, WantEntry};
use crate::ranges::RangeSet;
use crate::routing::{accept_offer, should_offer, LocalCopy, OfferDecision, Peer, RoleGraph};
use crate::store::{BundleStore, EntryState};
use crate::Millis;

pub const DEFAULT_CHUNK_SIZE: u64 = 64 * 1024;
pub const BEACON_INTERVAL_MS: Millis = 1000;
pub const HELLO_TIMEOUT_MS: Millis = 3000;
pub const IDLE_TIMEOUT_MS: Millis = 5000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionConfig {
    pub chunk_size: u64,
    pub hello_timeout_ms: Millis,
    pub idle_timeout_ms: Millis,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            hello_timeout_ms: HELLO_TIMEOUT_MS,
            idle_timeout_ms: IDLE_TIMEOUT_MS,
        }
    }
}

/// Reads payload bytes of locally held bundles.
pub trait ChunkSource {
    fn read_chunk(&self, id: &BundleId, offset: u64, len: usize) -> Result<Vec<u8>, String>;
}

impl ChunkSource for BundleStore {
    fn read_chunk(&self, id: &BundleId, offset: u64, len: usize) -> Result<Vec<u8>, String> {
        self.read_range(id, offset, len).map_err(|e| e.to_string())
    }
}

impl ChunkSource for HashMap<BundleId, Vec<u8>> {
    fn read_chunk(&self, id: &BundleId, offset: u64, len: usize) -> Result<Vec<u8>, String> {
        let data = self.get(id).ok_or_else(|| format!("no payload for {id}"))?;
        let start = offset as usize;
        data.get(start..start + len).map(<[u8]>::to_vec).ok_or_else(|| "range out of bounds".into())
    }
}

/// Snapshot of the local node taken when the link comes up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalView {
    pub node: Peer,
    pub graph: Arc<RoleGraph>,
    /// Complete, unexpired bundles in offer-queue order.
    pub offers: Vec<BundleMeta>,
    pub holdings: BTreeMap<BundleId, EntryState>,
    pub free_quota: u64,
}

impl LocalView {
    pub fn from_store(node: Peer, graph: Arc<RoleGraph>, store: &BundleStore, now: Millis) -> Self {
        let offers = store
            .offer_queue(now)
            .iter()
            .filter_map(|id| store.get(id).map(|e| e.meta.clone()))
            .collect();
        // Tombstones count as held so a re-offer is answered as a duplicate.
        let holdings = store
            .entries()
            .map(|e| (e.meta.id, e.state.clone()))
            .chain(store.released().map(|id| (*id, EntryState::Complete)))
            .collect();
        LocalView { node, graph, offers, holdings, free_quota: store.free_bytes() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Idle,
    HelloSent,
    Exchanging,
    Closing,
    Done,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    LinkUp { initiator: bool },
    FrameReceived(Frame),
    LinkDown,
    Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    SendFrame(Frame),
    StoreChunk { id: BundleId, offset: u64, data: Vec<u8> },
    CompleteBundle(BundleId),
    DeleteAfterCustody(BundleId),
    CloseLink,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AbortReason {
    LinkDown,
    ProtocolViolation(String),
    HelloTimeout,
    IdleTimeout,
    Local(String),
}

/// One bundle the sender will push, starting at the receiver's prefix end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    pub id: BundleId,
    pub start_offset: u64,
    pub total_len: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferPlan {
    pub entries: Vec<PlanEntry>,
}

/// What the peer reports holding of one bundle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerHolding {
    pub id: BundleId,
    pub complete: bool,
    pub ranges: RangeSet,
}

/// Orders what to send: offers in local priority order that pass `filter`,
/// minus those the peer already has, each resumed at the peer's prefix end.
pub fn plan_transfer(
    local_offers: &[BundleMeta],
    peer_manifest: &[PeerHolding],
    filter: impl Fn(&BundleMeta) -> bool,
) -> TransferPlan {
    let have: HashMap<&BundleId, &PeerHolding> = peer_manifest.iter().map(|h| (&h.id, h)).collect();
    let entries = local_offers
        .iter()
        .filter(|m| filter(m))
        .filter_map(|m| {
            let start = match have.get(&m.id) {
                Some(h) if h.complete || (m.payload_len > 0 && h.ranges.covers(m.payload_len)) => return None,
                Some(h) => h.ranges.prefix_end().min(m.payload_len),
                None => 0,
            };
            Some(PlanEntry { id: m.id, start_offset: start, total_len: m.payload_len })
        })
        .collect();
    TransferPlan { entries }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Outgoing {
    id: BundleId,
    total_len: u64,
    next_offset: u64,
    /// Zero-length payloads still need one (empty) chunk.
    sent_any: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Incoming {
    meta: BundleMeta,
    ranges: RangeSet,
    completed: bool,
}

struct Violation(String);

fn violation<T>(msg: impl Into<String>) -> Result<T, Violation> {
    Err(Violation(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    config: SessionConfig,
    local: LocalView,
    phase: Phase,
    peer: Option<Peer>,
    initiator: bool,
    hello_sent_at: Millis,
    last_activity: Millis,
    offered: Vec<BundleMeta>,
    outgoing: Vec<Outgoing>,
    incoming: BTreeMap<BundleId, Incoming>,
    manifest_received: bool,
    want_sent: bool,
    want_received: bool,
    started: bool,
    my_turn: bool,
    released: BTreeSet<BundleId>,
    completed: Vec<BundleId>,
    resumed: Vec<(BundleId, u64)>,
    bytes_sent: u64,
    bytes_received: u64,
    chunk_bytes_sent: u64,
    chunk_bytes_received: u64,
    abort_reason: Option<AbortReason>,
}

impl Session {
    pub fn new(local: LocalView, config: SessionConfig) -> Self {
        Session {
            config,
            local,
            phase: Phase::Idle,
            peer: None,
            initiator: false,
            hello_sent_at: 0,
            last_activity: 0,
            offered: Vec::new(),
            outgoing: Vec::new(),
            incoming: BTreeMap::new(),
            manifest_received: false,
            want_sent: false,
            want_received: false,
            started: false,
            my_turn: false,
            released: BTreeSet::new(),
            completed: Vec::new(),
            resumed: Vec::new(),
            bytes_sent: 0,
            bytes_received: 0,
            chunk_bytes_sent: 0,
            chunk_bytes_received: 0,
            abort_reason: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn peer(&self) -> Option<&Peer> {
        self.peer.as_ref()
    }

    pub fn local(&self) -> &Peer {
        &self.local.node
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Done | Phase::Aborted)
    }

    pub fn abort_reason(&self) -> Option<&AbortReason> {
        self.abort_reason.as_ref()
    }

    /// Metadata of a bundle the peer is sending us.
    pub fn incoming_meta(&self, id: &BundleId) -> Option<&BundleMeta> {
        self.incoming.get(id).map(|i| &i.meta)
    }

    pub fn incoming_ranges(&self, id: &BundleId) -> Option<&RangeSet> {
        self.incoming.get(id).map(|i| &i.ranges)
    }

    /// Next offset to send per planned bundle.
    pub fn outgoing_offsets(&self) -> Vec<(BundleId, u64)> {
        self.outgoing.iter().map(|o| (o.id, o.next_offset)).collect()
    }

    pub fn plan(&self) -> TransferPlan {
        TransferPlan {
            entries: self
                .resumed_or_fresh()
                .map(|(id, start, total)| PlanEntry { id, start_offset: start, total_len: total })
                .collect(),
        }
    }

    fn resumed_or_fresh(&self) -> impl Iterator<Item = (BundleId, u64, u64)> + '_ {
        self.outgoing.iter().map(move |o| {
            let start = self.resumed.iter().find(|(id, _)| *id == o.id).map_or(0, |(_, s)| *s);
            (o.id, start, o.total_len)
        })
    }

    /// Bundles this session completed locally, in order.
    pub fn completed(&self) -> &[BundleId] {
        &self.completed
    }

    /// Outgoing bundles resumed from a nonzero offset.
    pub fn resumed(&self) -> &[(BundleId, u64)] {
        &self.resumed
    }

    pub fn released(&self) -> impl Iterator<Item = &BundleId> {
        self.released.iter()
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    pub fn chunk_bytes_sent(&self) -> u64 {
        self.chunk_bytes_sent
    }

    pub fn chunk_bytes_received(&self) -> u64 {
        self.chunk_bytes_received
    }

    /// Aborts from the driver side, e.g. when applying an action failed.
    pub fn abort_local(&mut self, reason: impl Into<String>) -> Vec<Action> {
        if self.is_finished() {
            return Vec::new();
        }
        self.abort(AbortReason::Local(reason.into()));
        vec![Action::CloseLink]
    }

    fn abort(&mut self, reason: AbortReason) {
        self.phase = Phase::Aborted;
        self.abort_reason = Some(reason);
    }

    pub fn step(&mut self, now: Millis, event: Event, source: &dyn ChunkSource) -> Vec<Action> {
        if self.is_finished() {
            return Vec::new();
        }
        match event {
            Event::LinkUp { initiator } => {
                if self.phase != Phase::Idle {
                    return self.violate("link-up outside idle".into());
                }
                self.initiator = initiator;
                self.hello_sent_at = now;
                self.last_activity = now;
                self.phase = Phase::HelloSent;
                let hello = Frame::Hello { node: self.local.node.id.clone(), role: self.local.node.role };
                vec![self.send(hello)]
            }
            Event::LinkDown => {
                if self.phase == Phase::Closing {
                    self.phase = Phase::Done;
                } else {
                    self.abort(AbortReason::LinkDown);
                }
                Vec::new()
            }
            Event::Tick => {
                match self.phase {
                    Phase::HelloSent if now.saturating_sub(self.hello_sent_at) >= self.config.hello_timeout_ms => {
                        self.abort(AbortReason::HelloTimeout);
                        vec![Action::CloseLink]
                    }
                    Phase::Exchanging | Phase::Closing
                        if now.saturating_sub(self.last_activity) >= self.config.idle_timeout_ms =>
                    {
                        self.abort(AbortReason::IdleTimeout);
                        vec![Action::CloseLink]
                    }
                    _ => Vec::new(),
                }
            }
            Event::FrameReceived(frame) => {
                if matches!(frame, Frame::Beacon { .. }) {
                    return Vec::new();
                }
                self.bytes_received += frame.encoded_len() as u64;
                self.last_activity = now;
                let mut actions = Vec::new();
                match self.on_frame(frame, source, &mut actions) {
                    Ok(()) => actions,
                    Err(Violation(msg)) => self.violate(msg),
                }
            }
        }
    }

    fn violate(&mut self, msg: String) -> Vec<Action> {
        tracing::debug!(%msg, "protocol violation");
        self.abort(AbortReason::ProtocolViolation(msg));
        vec![Action::CloseLink]
    }

    fn send(&mut self, frame: Frame) -> Action {
        self.bytes_sent += frame.encoded_len() as u64;
        if let Frame::Chunk { data, .. } = &frame {
            self.chunk_bytes_sent += data.len() as u64;
        }
        Action::SendFrame(frame)
    }

    fn on_frame(
        &mut self,
        frame: Frame,
        source: &dyn ChunkSource,
        out: &mut Vec<Action>,
    ) -> Result<(), Violation> {
        match (self.phase, frame) {
            (Phase::HelloSent, Frame::Hello { node, role }) => {
                if node == self.local.node.id {
                    return violation("peer claims our own node id");
                }
                let peer = Peer::new(node, role);
                self.offered = self
                    .local
                    .offers
                    .iter()
                    .filter(|m| should_offer(m, &self.local.node, &peer, &self.local.graph, false))
                    .cloned()
                    .collect();
                let entries = self.offered.iter().map(manifest_entry).collect();
                self.peer = Some(peer);
                self.phase = Phase::Exchanging;
                out.push(self.send(Frame::Manifest(entries)));
                Ok(())
            }
            (Phase::Exchanging, Frame::Manifest(entries)) => {
                if self.manifest_received {
                    return violation("duplicate MANIFEST");
                }
                self.manifest_received = true;
                let wants = self.answer_manifest(entries)?;
                self.want_sent = true;
                out.push(self.send(Frame::Want(wants)));
                self.maybe_start(source, out);
                Ok(())
            }
            (Phase::Exchanging, Frame::Want(entries)) => {
                if self.want_received {
                    return violation("duplicate WANT");
                }
                self.want_received = true;
                self.apply_want(entries, out)?;
                self.maybe_start(source, out);
                Ok(())
            }
            (Phase::Exchanging, Frame::Chunk { id, offset, data }) => {
                if self.my_turn || !self.want_sent {
                    return violation("CHUNK out of turn");
                }
                let chunk = self.config.chunk_size;
                let incoming = match self.incoming.get_mut(&id) {
                    Some(i) => i,
                    None => return violation(format!("CHUNK for unrequested bundle {id}")),
                };
                let total = incoming.meta.payload_len;
                let len = data.len() as u64;
                let valid = offset % chunk == 0
                    && len <= chunk
                    && offset + len <= total
                    && (len > 0 || total == 0);
                if !valid {
                    return violation(format!("misaligned CHUNK {id} at {offset}+{len}"));
                }
                incoming.ranges.insert(offset, offset + len);
                let newly_complete = !incoming.completed && incoming.ranges.covers(total);
                if newly_complete {
                    incoming.completed = true;
                }
                self.chunk_bytes_received += len;
                out.push(Action::StoreChunk { id, offset, data });
                if newly_complete {
                    self.completed.push(id);
                    out.push(Action::CompleteBundle(id));
                }
                let ack = AckEntry { id, offset, len: len as u32, complete: newly_complete };
                self.my_turn = true;
                match self.next_chunk(source) {
                    Ok(Some(chunk_frame)) => {
                        out.push(self.send(Frame::Ack { pass: false, entries: vec![ack] }));
                        out.push(self.send(chunk_frame));
                    }
                    Ok(None) => {
                        out.push(self.send(Frame::Ack { pass: true, entries: vec![ack] }));
                    }
                    Err(e) => {
                        self.abort(AbortReason::Local(e));
                        out.push(Action::CloseLink);
                        return Ok(());
                    }
                }
                self.my_turn = false;
                Ok(())
            }
            (Phase::Exchanging, Frame::Ack { pass, entries }) => {
                for e in entries {
                    let known = self.outgoing.iter().any(|o| o.id == e.id);
                    if !known {
                        return violation(format!("ACK for bundle {} never sent", e.id));
                    }
                    if e.complete {
                        if let Some(a) = self.custody_handoff(&e.id) {
                            out.push(a);
                        }
                    }
                }
                if pass {
                    if self.my_turn || !self.started_for_peer() {
                        return violation("pass out of turn");
                    }
                    self.my_turn = true;
                    self.take_turn(source, out, false);
                }
                Ok(())
            }
            (Phase::Exchanging, Frame::Bye) => {
                out.push(self.send(Frame::Bye));
                self.phase = Phase::Done;
                Ok(())
            }
            (Phase::Closing, Frame::Bye) => {
                self.phase = Phase::Done;
                Ok(())
            }
            (phase, frame) => violation(format!("{:?} not allowed in {phase:?}", frame.frame_type())),
        }
    }

    /// The responder may only be passed the turn once the exchange has started.
    fn started_for_peer(&self) -> bool {
        self.want_sent && self.want_received
    }

    fn answer_manifest(&mut self, entries: Vec<ManifestEntry>) -> Result<Vec<WantEntry>, Violation> {
        let mut free = self.local.free_quota;
        let mut wants = Vec::new();
        for e in entries {
            let meta = BundleMeta {
                id: e.id,
                source: e.source,
                destination: e.destination,
                created_at: e.created_at,
                ttl: e.ttl,
                priority: e.priority,
                kind: e.kind,
                payload_len: e.total_len,
                payload_digest: e.payload_digest,
            };
            if !meta.id_matches() || meta.ttl == 0 {
                return violation(format!("MANIFEST entry {} does not match its fields", meta.id));
            }
            if self.incoming.contains_key(&meta.id) || wants.iter().any(|w: &WantEntry| w.id == meta.id) {
                return violation(format!("bundle {} offered twice", meta.id));
            }
            let (copy, ranges) = match self.local.holdings.get(&meta.id) {
                Some(EntryState::Complete) => (LocalCopy::Complete, RangeSet::full(meta.payload_len)),
                Some(EntryState::Partial(r)) => (LocalCopy::Partial, r.clone()),
                None => (LocalCopy::None, RangeSet::new()),
            };
            match accept_offer(&meta, copy, free) {
                OfferDecision::RejectDuplicate => wants.push(WantEntry {
                    id: meta.id,
                    have_complete: true,
                    start_offset: meta.payload_len,
                }),
                OfferDecision::RejectQuota => {}
                OfferDecision::Accept => {
                    if copy == LocalCopy::None {
                        free -= meta.payload_len;
                    }
                    wants.push(WantEntry {
                        id: meta.id,
                        have_complete: false,
                        start_offset: ranges.prefix_end(),
                    });
                    self.incoming.insert(meta.id, Incoming { meta, ranges, completed: false });
                }
            }
        }
        Ok(wants)
    }

    fn apply_want(&mut self, entries: Vec<WantEntry>, out: &mut Vec<Action>) -> Result<(), Violation> {
        let mut holdings = Vec::with_capacity(entries.len());
        for w in &entries {
            let Some(meta) = self.offered.iter().find(|m| m.id == w.id) else {
                return violation(format!("WANT for bundle {} that was not offered", w.id));
            };
            if w.start_offset > meta.payload_len {
                return violation(format!("WANT offset beyond end of {}", w.id));
            }
            holdings.push(PeerHolding {
                id: w.id,
                complete: w.have_complete,
                ranges: RangeSet::from_ranges([(0, w.start_offset)]),
            });
        }
        let wanted: BTreeSet<BundleId> = entries.iter().map(|w| w.id).collect();
        let plan = plan_transfer(&self.offered, &holdings, |m| wanted.contains(&m.id));
        for h in holdings.iter().filter(|h| h.complete) {
            if let Some(a) = self.custody_handoff(&h.id) {
                out.push(a);
            }
        }
        for p in plan.entries {
            if p.start_offset > 0 {
                self.resumed.push((p.id, p.start_offset));
            }
            self.outgoing.push(Outgoing {
                id: p.id,
                total_len: p.total_len,
                next_offset: p.start_offset,
                sent_any: false,
            });
        }
        Ok(())
    }

    fn maybe_start(&mut self, source: &dyn ChunkSource, out: &mut Vec<Action>) {
        if self.initiator && !self.started && self.want_sent && self.want_received {
            self.started = true;
            self.my_turn = true;
            self.take_turn(source, out, true);
        }
    }

    /// Called while holding the turn after a pass (or at start): send a chunk,
    /// pass when starting empty-handed, or close when both sides are drained.
    fn take_turn(&mut self, source: &dyn ChunkSource, out: &mut Vec<Action>, opening: bool) {
        match self.next_chunk(source) {
            Ok(Some(frame)) => {
                out.push(self.send(frame));
                self.my_turn = false;
            }
            Ok(None) if opening => {
                out.push(self.send(Frame::Ack { pass: true, entries: Vec::new() }));
                self.my_turn = false;
            }
            Ok(None) => {
                out.push(self.send(Frame::Bye));
                self.phase = Phase::Closing;
            }
            Err(e) => {
                self.abort(AbortReason::Local(e));
                out.push(Action::CloseLink);
            }
        }
    }

    fn next_chunk(&mut self, source: &dyn ChunkSource) -> Result<Option<Frame>, String> {
        let chunk = self.config.chunk_size;
        let Some(o) = self
            .outgoing
            .iter_mut()
            .find(|o| o.next_offset < o.total_len || (o.total_len == 0 && !o.sent_any))
        else {
            return Ok(None);
        };
        let len = chunk.min(o.total_len - o.next_offset);
        let data = source.read_chunk(&o.id, o.next_offset, len as usize)?;
        let frame = Frame::Chunk { id: o.id, offset: o.next_offset, data };
        o.next_offset += len;
        o.sent_any = true;
        Ok(Some(frame))
    }

    /// Single-copy custody: release our copy once the peer holds the bundle
    /// completely and is its destination or next hop.
    pub fn custody_handoff(&mut self, acked: &BundleId) -> Option<Action> {
        let peer = self.peer.as_ref()?;
        let meta = self.offered.iter().find(|m| &m.id == acked)?;
        let eligible = self
            .local
            .graph
            .is_next_hop(self.local.node.role, &meta.destination, peer)
            .unwrap_or(false);
        if eligible && self.released.insert(*acked) {
            Some(Action::DeleteAfterCustody(*acked))
        } else {
            None
        }
    }
}

fn manifest_entry(m: &BundleMeta) -> ManifestEntry {
    ManifestEntry {
        id: m.id,
        total_len: m.payload_len,
        destination: m.destination.clone(),
        kind: m.kind,
        priority: m.priority,
        complete: true,
        ranges: RangeSet::full(m.payload_len),
        source: m.source.clone(),
        created_at: m.created_at,
        ttl: m.ttl,
        payload_digest: m.payload_digest,
    }
}
