use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use proptest::prelude::*;

use super::frame::{AckEntry, Frame, ManifestEntry, WantEntry};
use super::link::{apply_with, run_budgeted_contact, Applied, Endpoint};
use super::session::*;
use crate::bundle::{Bundle, BundleId, BundleKind, BundleLimits, BundleMeta, NodeId, NodeRole, Priority};
use crate::ranges::RangeSet;
use crate::routing::{Peer, RoleGraph};
use crate::store::{offer_order, EntryState};
use crate::Millis;

fn n(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

fn graph() -> Arc<RoleGraph> {
    Arc::new(
        RoleGraph::new([
            (n("rural-1"), NodeRole::Rural),
            (n("rural-2"), NodeRole::Rural),
            (n("mule-1"), NodeRole::Mule),
            (n("urban-1"), NodeRole::Urban),
        ])
        .unwrap(),
    )
}

fn peer(id: &str) -> Peer {
    Peer::new(n(id), graph().role_of(&n(id)).unwrap())
}

fn bundle(src: &str, dst: &str, kind: BundleKind, payload: &[u8], created_at: Millis) -> Bundle {
    Bundle::create(
        n(src),
        n(dst),
        kind,
        kind.default_priority(),
        payload.to_vec(),
        1_000_000,
        created_at,
        &BundleLimits { max_payload: u64::MAX },
    )
    .unwrap()
}

fn cfg(chunk: u64) -> SessionConfig {
    SessionConfig { chunk_size: chunk, ..SessionConfig::default() }
}

/// In-memory node: enough state to drive sessions end to end.
#[derive(Clone, Debug)]
struct MemNode {
    me: Peer,
    complete: BTreeMap<BundleId, (BundleMeta, Vec<u8>)>,
    partial: BTreeMap<BundleId, (BundleMeta, Vec<u8>, RangeSet)>,
    payloads: HashMap<BundleId, Vec<u8>>,
    released: Vec<BundleId>,
    completions: Vec<BundleId>,
    chunk_bytes_sent: HashMap<BundleId, u64>,
}

impl MemNode {
    fn new(id: &str) -> Self {
        MemNode {
            me: peer(id),
            complete: BTreeMap::new(),
            partial: BTreeMap::new(),
            payloads: HashMap::new(),
            released: Vec::new(),
            completions: Vec::new(),
            chunk_bytes_sent: HashMap::new(),
        }
    }

    fn hold(&mut self, b: &Bundle) {
        self.complete.insert(b.id(), (b.meta.clone(), b.payload.clone()));
        self.payloads.insert(b.id(), b.payload.clone());
    }

    fn view(&self) -> LocalView {
        let mut offers: Vec<BundleMeta> = self.complete.values().map(|(m, _)| m.clone()).collect();
        offers.sort_by(offer_order);
        let mut holdings: BTreeMap<BundleId, EntryState> =
            self.complete.keys().map(|id| (*id, EntryState::Complete)).collect();
        for id in &self.released {
            holdings.insert(*id, EntryState::Complete);
        }
        for (id, (_, _, r)) in &self.partial {
            holdings.insert(*id, EntryState::Partial(r.clone()));
        }
        LocalView { node: self.me.clone(), graph: graph(), offers, holdings, free_quota: u64::MAX / 2 }
    }

    fn session(&self, chunk: u64) -> Session {
        Session::new(self.view(), cfg(chunk))
    }
}

impl Endpoint for MemNode {
    fn chunk_source(&self) -> &dyn ChunkSource {
        &self.payloads
    }

    fn apply(&mut self, session: &mut Session, _now: Millis, actions: Vec<Action>) -> Applied {
        for a in &actions {
            if let Action::SendFrame(Frame::Chunk { id, data, .. }) = a {
                *self.chunk_bytes_sent.entry(*id).or_default() += data.len() as u64;
            }
        }
        apply_with(session, actions, |s, action| {
            match action {
                Action::StoreChunk { id, offset, data } => {
                    if self.complete.contains_key(&id) {
                        return Ok(());
                    }
                    let meta = s.incoming_meta(&id).unwrap().clone();
                    let len = meta.payload_len as usize;
                    let entry = self.partial.entry(id).or_insert_with(|| (meta, vec![0; len], RangeSet::new()));
                    entry.1[offset as usize..offset as usize + data.len()].copy_from_slice(&data);
                    entry.2.insert(offset, offset + data.len() as u64);
                }
                Action::CompleteBundle(id) => {
                    let (meta, data, _) = self.partial.remove(&id).unwrap();
                    assert_eq!(crate::bundle::sha256(&data), meta.payload_digest);
                    assert!(!self.complete.contains_key(&id), "completed twice");
                    self.completions.push(id);
                    self.payloads.insert(id, data.clone());
                    self.complete.insert(id, (meta, data));
                }
                Action::DeleteAfterCustody(id) => {
                    self.complete.remove(&id);
                    self.payloads.remove(&id);
                    self.released.push(id);
                }
                Action::SendFrame(_) | Action::CloseLink => unreachable!(),
            }
            Ok(())
        })
    }
}

fn step(s: &mut Session, ev: Event) -> Vec<Action> {
    s.step(0, ev, &HashMap::new())
}

fn frames(actions: &[Action]) -> Vec<Frame> {
    actions
        .iter()
        .filter_map(|a| match a {
            Action::SendFrame(f) => Some(f.clone()),
            _ => None,
        })
        .collect()
}

fn manifest_entry(b: &Bundle) -> ManifestEntry {
    ManifestEntry {
        id: b.id(),
        total_len: b.meta.payload_len,
        destination: b.meta.destination.clone(),
        kind: b.meta.kind,
        priority: b.meta.priority,
        complete: true,
        ranges: RangeSet::full(b.meta.payload_len),
        source: b.meta.source.clone(),
        created_at: b.meta.created_at,
        ttl: b.meta.ttl,
        payload_digest: b.meta.payload_digest,
    }
}

#[test]
fn scripted_three_chunk_receive() {
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, b"0123456789", 5);
    let rural = MemNode::new("rural-1");
    let mut s = rural.session(4);
    let id = b.id();

    assert_eq!(
        step(&mut s, Event::LinkUp { initiator: false }),
        vec![Action::SendFrame(Frame::Hello { node: n("rural-1"), role: NodeRole::Rural })]
    );
    assert_eq!(s.phase(), Phase::HelloSent);
    assert_eq!(
        step(&mut s, Event::FrameReceived(Frame::Hello { node: n("mule-1"), role: NodeRole::Mule })),
        vec![Action::SendFrame(Frame::Manifest(vec![]))]
    );
    assert_eq!(s.phase(), Phase::Exchanging);
    assert_eq!(
        step(&mut s, Event::FrameReceived(Frame::Manifest(vec![manifest_entry(&b)]))),
        vec![Action::SendFrame(Frame::Want(vec![WantEntry { id, have_complete: false, start_offset: 0 }]))]
    );
    assert_eq!(step(&mut s, Event::FrameReceived(Frame::Want(vec![]))), vec![]);

    let ack = |offset, len, complete| {
        Action::SendFrame(Frame::Ack { pass: true, entries: vec![AckEntry { id, offset, len, complete }] })
    };
    assert_eq!(
        step(&mut s, Event::FrameReceived(Frame::Chunk { id, offset: 0, data: b"0123".to_vec() })),
        vec![Action::StoreChunk { id, offset: 0, data: b"0123".to_vec() }, ack(0, 4, false)]
    );
    assert_eq!(
        step(&mut s, Event::FrameReceived(Frame::Chunk { id, offset: 4, data: b"4567".to_vec() })),
        vec![Action::StoreChunk { id, offset: 4, data: b"4567".to_vec() }, ack(4, 4, false)]
    );
    assert_eq!(
        step(&mut s, Event::FrameReceived(Frame::Chunk { id, offset: 8, data: b"89".to_vec() })),
        vec![
            Action::StoreChunk { id, offset: 8, data: b"89".to_vec() },
            Action::CompleteBundle(id),
            ack(8, 2, true)
        ]
    );
    assert_eq!(step(&mut s, Event::FrameReceived(Frame::Bye)), vec![Action::SendFrame(Frame::Bye)]);
    assert_eq!(s.phase(), Phase::Done);
    assert_eq!(s.completed(), &[id]);
}

#[test]
fn scripted_three_chunk_send() {
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, b"0123456789", 5);
    let mut mule = MemNode::new("mule-1");
    mule.hold(&b);
    let id = b.id();
    let mut s = mule.session(4);
    let src = mule.payloads.clone();
    let mut st = |ev| s.step(0, ev, &src);

    assert_eq!(frames(&st(Event::LinkUp { initiator: true })).len(), 1);
    let m = frames(&st(Event::FrameReceived(Frame::Hello { node: n("rural-1"), role: NodeRole::Rural })));
    assert_eq!(m, vec![Frame::Manifest(vec![manifest_entry(&b)])]);
    assert_eq!(
        frames(&st(Event::FrameReceived(Frame::Manifest(vec![])))),
        vec![Frame::Want(vec![])]
    );
    // initiator opens with the first chunk once both WANTs are known
    assert_eq!(
        st(Event::FrameReceived(Frame::Want(vec![WantEntry { id, have_complete: false, start_offset: 0 }]))),
        vec![Action::SendFrame(Frame::Chunk { id, offset: 0, data: b"0123".to_vec() })]
    );
    let pass_ack = |offset, len, complete| {
        Event::FrameReceived(Frame::Ack { pass: true, entries: vec![AckEntry { id, offset, len, complete }] })
    };
    assert_eq!(
        st(pass_ack(0, 4, false)),
        vec![Action::SendFrame(Frame::Chunk { id, offset: 4, data: b"4567".to_vec() })]
    );
    assert_eq!(
        st(pass_ack(4, 4, false)),
        vec![Action::SendFrame(Frame::Chunk { id, offset: 8, data: b"89".to_vec() })]
    );
    assert_eq!(
        st(pass_ack(8, 2, true)),
        vec![Action::DeleteAfterCustody(id), Action::SendFrame(Frame::Bye)]
    );
    assert_eq!(st(Event::FrameReceived(Frame::Bye)), vec![]);
    assert_eq!(s.phase(), Phase::Done);
}

#[test]
fn pair_run_delivers_and_releases_custody() {
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &[7u8; 1000], 5);
    let mut mule = MemNode::new("mule-1");
    mule.hold(&b);
    let mut rural = MemNode::new("rural-1");
    let (mut sm, mut sr) = (mule.session(64), rural.session(64));
    let out = run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, u64::MAX, 0);
    assert!(!out.budget_exhausted);
    assert_eq!(sm.phase(), Phase::Done);
    assert_eq!(sr.phase(), Phase::Done);
    assert_eq!(rural.completions, vec![b.id()]);
    assert!(mule.complete.is_empty(), "mule releases custody after full ack");
    assert_eq!(mule.chunk_bytes_sent[&b.id()], 1000);
}

/// Budget that lets exactly `k` chunks of the single bundle through.
fn budget_for_chunks(mule: &MemNode, rural: &MemNode, chunk: u64, k: usize) -> u64 {
    // Measure a full run, then cut right before the (k+1)-th chunk frame.
    let (mut m, mut r) = (mule.clone(), rural.clone());
    let (mut sm, mut sr) = (m.session(chunk), r.session(chunk));
    let mut log = Vec::new();
    struct Tap<'a> {
        inner: &'a mut MemNode,
        log: &'a mut Vec<Frame>,
    }
    impl Endpoint for Tap<'_> {
        fn chunk_source(&self) -> &dyn ChunkSource {
            self.inner.chunk_source()
        }
        fn apply(&mut self, s: &mut Session, now: Millis, actions: Vec<Action>) -> Applied {
            let applied = self.inner.apply(s, now, actions);
            self.log.extend(applied.frames.iter().cloned());
            applied
        }
    }
    let mut other_log = Vec::new();
    run_budgeted_contact(
        &mut Tap { inner: &mut m, log: &mut log },
        &mut sm,
        &mut Tap { inner: &mut r, log: &mut other_log },
        &mut sr,
        None,
        u64::MAX,
        0,
    );
    // Sum everything both sides sent before the (k+1)-th chunk in mule's log,
    // plus the acks for the first k chunks. Simple upper bound: all rural frames
    // up to and including the k-th ack.
    let mut chunks = 0;
    let mut bytes = 0u64;
    for f in &log {
        if matches!(f, Frame::Chunk { .. }) {
            if chunks == k {
                break;
            }
            chunks += 1;
        }
        bytes += f.encoded_len() as u64;
    }
    let mut acks = 0;
    for f in &other_log {
        if acks == k {
            break;
        }
        if matches!(f, Frame::Ack { .. }) {
            acks += 1;
        }
        bytes += f.encoded_len() as u64;
    }
    bytes
}

#[test]
fn interrupted_contact_resumes_at_prefix() {
    let chunk = 4;
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, b"0123456789", 5);
    let mut mule = MemNode::new("mule-1");
    mule.hold(&b);
    let mut rural = MemNode::new("rural-1");

    let budget = budget_for_chunks(&mule, &rural, chunk, 2);
    let (mut sm, mut sr) = (mule.session(chunk), rural.session(chunk));
    let out = run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, budget, 0);
    assert!(out.budget_exhausted);
    assert_eq!(sr.phase(), Phase::Aborted);
    assert_eq!(sm.phase(), Phase::Aborted);
    assert_eq!(sr.abort_reason(), Some(&AbortReason::LinkDown));
    assert_eq!(rural.partial[&b.id()].2, RangeSet::from_ranges([(0, 8)]));
    assert!(mule.complete.contains_key(&b.id()), "custody retained after abort");

    // second contact: WANT carries 2 * chunk, only the third chunk travels
    let sent_before = mule.chunk_bytes_sent[&b.id()];
    let (mut sm, mut sr) = (mule.session(chunk), rural.session(chunk));
    run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, u64::MAX, 0);
    assert_eq!(sm.resumed(), &[(b.id(), 8)]);
    assert_eq!(mule.chunk_bytes_sent[&b.id()] - sent_before, 2);
    assert_eq!(rural.completions, vec![b.id()]);
    assert_eq!(rural.complete[&b.id()].1, b.payload);
    assert!(mule.complete.is_empty());
}

#[test]
fn manifest_in_idle_is_violation() {
    let mut s = MemNode::new("rural-1").session(4);
    assert_eq!(step(&mut s, Event::FrameReceived(Frame::Manifest(vec![]))), vec![Action::CloseLink]);
    assert_eq!(s.phase(), Phase::Aborted);
    assert!(matches!(s.abort_reason(), Some(AbortReason::ProtocolViolation(_))));
    // aborted exactly once: later events are inert
    assert_eq!(step(&mut s, Event::LinkDown), vec![]);
    assert!(matches!(s.abort_reason(), Some(AbortReason::ProtocolViolation(_))));
}

#[test]
fn link_up_twice_is_violation() {
    let mut s = MemNode::new("rural-1").session(4);
    step(&mut s, Event::LinkUp { initiator: true });
    assert_eq!(step(&mut s, Event::LinkUp { initiator: true }), vec![Action::CloseLink]);
}

#[test]
fn chunk_for_unknown_bundle_is_violation() {
    let mut s = MemNode::new("rural-1").session(4);
    step(&mut s, Event::LinkUp { initiator: false });
    step(&mut s, Event::FrameReceived(Frame::Hello { node: n("mule-1"), role: NodeRole::Mule }));
    step(&mut s, Event::FrameReceived(Frame::Manifest(vec![])));
    let acts = step(&mut s, Event::FrameReceived(Frame::Chunk { id: BundleId([1; 32]), offset: 0, data: vec![1] }));
    assert_eq!(acts, vec![Action::CloseLink]);
}

#[test]
fn tampered_manifest_entry_is_violation() {
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, b"abc", 5);
    let mut e = manifest_entry(&b);
    e.created_at += 1;
    let mut s = MemNode::new("rural-1").session(4);
    step(&mut s, Event::LinkUp { initiator: false });
    step(&mut s, Event::FrameReceived(Frame::Hello { node: n("mule-1"), role: NodeRole::Mule }));
    assert_eq!(step(&mut s, Event::FrameReceived(Frame::Manifest(vec![e]))), vec![Action::CloseLink]);
}

#[test]
fn hello_and_idle_timeouts() {
    let mut s = MemNode::new("rural-1").session(4);
    s.step(1000, Event::LinkUp { initiator: true }, &HashMap::new());
    assert_eq!(s.step(3999, Event::Tick, &HashMap::new()), vec![]);
    assert_eq!(s.step(4000, Event::Tick, &HashMap::new()), vec![Action::CloseLink]);
    assert_eq!(s.abort_reason(), Some(&AbortReason::HelloTimeout));

    let mut s = MemNode::new("rural-1").session(4);
    s.step(0, Event::LinkUp { initiator: false }, &HashMap::new());
    s.step(10, Event::FrameReceived(Frame::Hello { node: n("mule-1"), role: NodeRole::Mule }), &HashMap::new());
    assert_eq!(s.step(5009, Event::Tick, &HashMap::new()), vec![]);
    assert_eq!(s.step(5010, Event::Tick, &HashMap::new()), vec![Action::CloseLink]);
    assert_eq!(s.abort_reason(), Some(&AbortReason::IdleTimeout));
}

#[test]
fn duplicate_at_peer_releases_without_chunks() {
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &[1; 100], 5);
    let mut mule = MemNode::new("mule-1");
    mule.hold(&b);
    let mut rural = MemNode::new("rural-1");
    rural.hold(&b);
    let (mut sm, mut sr) = (mule.session(64), rural.session(64));
    run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, u64::MAX, 0);
    assert!(rural.completions.is_empty());
    assert!(mule.chunk_bytes_sent.is_empty());
    assert!(mule.complete.is_empty());
    assert_eq!(sm.phase(), Phase::Done);
}

#[test]
fn mule_to_mule_exchanges_nothing() {
    let g = Arc::new(
        RoleGraph::new([
            (n("mule-1"), NodeRole::Mule),
            (n("mule-2"), NodeRole::Mule),
            (n("rural-1"), NodeRole::Rural),
        ])
        .unwrap(),
    );
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &[1; 10], 5);
    let mk = |id: &str, hold: bool| {
        let mut v = LocalView {
            node: Peer::new(n(id), NodeRole::Mule),
            graph: g.clone(),
            offers: vec![],
            holdings: BTreeMap::new(),
            free_quota: 1 << 30,
        };
        if hold {
            v.offers.push(b.meta.clone());
            v.holdings.insert(b.id(), EntryState::Complete);
        }
        Session::new(v, cfg(64))
    };
    let mut m1 = MemNode::new("mule-1");
    m1.hold(&b);
    let mut m2 = MemNode::new("mule-1");
    m2.me = Peer::new(n("mule-2"), NodeRole::Mule);
    let (mut s1, mut s2) = (mk("mule-1", true), mk("mule-2", false));
    run_budgeted_contact(&mut m1, &mut s1, &mut m2, &mut s2, None, u64::MAX, 0);
    assert_eq!(s1.phase(), Phase::Done);
    assert_eq!(s2.phase(), Phase::Done);
    assert_eq!(s1.chunk_bytes_sent(), 0);
    assert!(m1.complete.contains_key(&b.id()));
}

#[test]
fn plan_transfer_resumes_and_skips() {
    let mib = 1024 * 1024;
    let b1 = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &vec![1; mib], 1);
    let b2 = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &vec![2; mib], 2);
    let b3 = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &[3; 500], 3);
    let offers = vec![b1.meta.clone(), b2.meta.clone(), b3.meta.clone()];
    let peer = vec![
        PeerHolding { id: b1.id(), complete: true, ranges: RangeSet::full(mib as u64) },
        PeerHolding { id: b2.id(), complete: false, ranges: RangeSet::from_ranges([(0, 131072)]) },
    ];
    let plan = plan_transfer(&offers, &peer, |_| true);
    assert_eq!(
        plan.entries,
        vec![
            PlanEntry { id: b2.id(), start_offset: 131072, total_len: 1048576 },
            PlanEntry { id: b3.id(), start_offset: 0, total_len: 500 },
        ]
    );
    let all: Vec<PeerHolding> = offers
        .iter()
        .map(|m| PeerHolding { id: m.id, complete: true, ranges: RangeSet::full(m.payload_len) })
        .collect();
    assert!(plan_transfer(&offers, &all, |_| true).entries.is_empty());
}

#[test]
fn control_request_planned_before_bulk_content() {
    let big = bundle("rural-1", "urban-1", BundleKind::ContentUpdate, &vec![0; 30 * 1024 * 1024], 1);
    let req = bundle("rural-1", "urban-1", BundleKind::TopicRequest, b"{}", 50);
    let mut offers = vec![big.meta.clone(), req.meta.clone()];
    offers.sort_by(offer_order);
    let plan = plan_transfer(&offers, &[], |_| true);
    assert_eq!(plan.entries[0].id, req.id());
    assert_eq!(plan.entries[0].start_offset, 0);
    assert_eq!(plan.entries[1].id, big.id());
}

fn custody_case(local: &str, peer_id: &str, dst: &str) -> bool {
    let b = bundle("rural-1", dst, BundleKind::ContentResponse, b"x", 1);
    let mut node = MemNode::new(local);
    node.hold(&b);
    let mut s = node.session(64);
    step(&mut s, Event::LinkUp { initiator: true });
    let p = peer(peer_id);
    s.step(0, Event::FrameReceived(Frame::Hello { node: p.id, role: p.role }), &node.payloads);
    s.custody_handoff(&b.id()) == Some(Action::DeleteAfterCustody(b.id()))
}

#[test]
fn custody_rules() {
    assert!(custody_case("rural-1", "mule-1", "urban-1"));
    assert!(custody_case("mule-1", "urban-1", "urban-1"));
    assert!(custody_case("urban-1", "mule-1", "rural-2"));
    // mule meeting a rural that is not the destination keeps the bundle
    assert!(!custody_case("mule-1", "rural-2", "urban-1"));
}

#[test]
fn bidirectional_turns_interleave() {
    let chunk = 16;
    let to_urban = bundle("rural-1", "urban-1", BundleKind::ContentUpdate, &[1; 64], 1);
    let to_rural = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &[2; 64], 1);
    let req = bundle("rural-1", "urban-1", BundleKind::TopicRequest, b"r", 9);
    let mut mule = MemNode::new("mule-1");
    mule.hold(&to_rural);
    let mut rural = MemNode::new("rural-1");
    rural.hold(&to_urban);
    rural.hold(&req);
    let (mut sm, mut sr) = (mule.session(chunk), rural.session(chunk));
    run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, u64::MAX, 0);
    assert_eq!(mule.completions, vec![req.id(), to_urban.id()]);
    assert_eq!(rural.completions, vec![to_rural.id()]);
    assert!(rural.complete.contains_key(&to_rural.id()));
    assert!(!rural.complete.contains_key(&req.id()));
}

#[test]
fn replay_is_deterministic() {
    let b = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &[9; 300], 5);
    let run = || {
        let mut mule = MemNode::new("mule-1");
        mule.hold(&b);
        let mut rural = MemNode::new("rural-1");
        let (mut sm, mut sr) = (mule.session(64), rural.session(64));
        run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, 500, 0);
        (sm, sr, rural.partial.clone())
    };
    let (a, b2) = (run(), run());
    assert_eq!(a.0, b2.0);
    assert_eq!(a.1, b2.1);
    assert_eq!(format!("{:?}", a.2), format!("{:?}", b2.2));
}

#[test]
fn zero_length_request_is_delivered() {
    let b = bundle("rural-1", "urban-1", BundleKind::TopicRequest, b"", 5);
    let mut rural = MemNode::new("rural-1");
    rural.hold(&b);
    let mut mule = MemNode::new("mule-1");
    let (mut sm, mut sr) = (mule.session(64), rural.session(64));
    run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, u64::MAX, 0);
    assert_eq!(mule.completions, vec![b.id()]);
    assert!(rural.complete.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random payload sizes and per-contact budgets across a rural-mule-urban
    /// line: exactly-once completion, bounded resend and eventual delivery.
    #[test]
    fn contact_sequences_preserve_invariants(
        sizes in prop::collection::vec(0usize..400, 1..5),
        budgets in prop::collection::vec(150u64..1500, 1..40),
    ) {
        let chunk = 32u64;
        let mut rural = MemNode::new("rural-1");
        let mut urban = MemNode::new("urban-1");
        let mut mule = MemNode::new("mule-1");
        let mut all = Vec::new();
        for (i, &len) in sizes.iter().enumerate() {
            let payload: Vec<u8> = (0..len).map(|j| (i * 31 + j) as u8).collect();
            let kind = if len == 0 { BundleKind::TopicRequest } else { BundleKind::ContentResponse };
            let b = bundle("urban-1", "rural-1", kind, &payload, i as u64);
            urban.hold(&b);
            all.push(b);
        }
        // aborted sessions that touched each bundle, from the sender side
        let mut aborts: HashMap<BundleId, u64> = HashMap::new();
        let mut sent_total: HashMap<BundleId, u64> = HashMap::new();
        let mut visit = |stop: &mut MemNode, mule: &mut MemNode, budget: u64| {
            let before_m = mule.chunk_bytes_sent.clone();
            let before_s = stop.chunk_bytes_sent.clone();
            let (mut sm, mut ss) = (mule.session(chunk), stop.session(chunk));
            run_budgeted_contact(mule, &mut sm, stop, &mut ss, None, budget, 0);
            let aborted = sm.phase() == Phase::Aborted;
            for (node, before) in [(&*mule, before_m), (&*stop, before_s)] {
                for (id, &v) in &node.chunk_bytes_sent {
                    let delta = v - before.get(id).copied().unwrap_or(0);
                    if delta > 0 {
                        *sent_total.entry(*id).or_default() += delta;
                        if aborted {
                            *aborts.entry(*id).or_default() += 1;
                        }
                    }
                }
            }
        };
        for (k, &budget) in budgets.iter().enumerate() {
            if k % 2 == 0 {
                visit(&mut urban, &mut mule, budget);
            } else {
                visit(&mut rural, &mut mule, budget);
            }
        }
        // then generous contacts until everything lands
        for _ in 0..(2 * all.len() + 2) {
            visit(&mut urban, &mut mule, 1 << 20);
            visit(&mut rural, &mut mule, 1 << 20);
        }
        let mut seen = std::collections::HashSet::new();
        for id in &rural.completions {
            prop_assert!(seen.insert(*id), "completed twice at rural");
        }
        for b in &all {
            prop_assert!(rural.complete.contains_key(&b.id()), "not delivered");
            prop_assert_eq!(&rural.complete[&b.id()].1, &b.payload);
            prop_assert!(!mule.complete.contains_key(&b.id()));
            prop_assert!(!urban.complete.contains_key(&b.id()));
            // each hop may resend at most one chunk per aborted session
            let hops = 2;
            let bound = hops * b.meta.payload_len + chunk * aborts.get(&b.id()).copied().unwrap_or(0);
            prop_assert!(sent_total.get(&b.id()).copied().unwrap_or(0) <= bound);
        }
    }

    /// At every point some node holds a complete copy of each undelivered bundle.
    #[test]
    fn custody_never_drops_last_copy(budgets in prop::collection::vec(100u64..800, 1..30)) {
        let chunk = 32u64;
        let b = bundle("rural-1", "urban-1", BundleKind::ContentUpdate, &[5; 200], 1);
        let mut rural = MemNode::new("rural-1");
        rural.hold(&b);
        let mut urban = MemNode::new("urban-1");
        let mut mule = MemNode::new("mule-1");
        for (k, &budget) in budgets.iter().enumerate() {
            let stop = if k % 2 == 0 { &mut rural } else { &mut urban };
            let (mut sm, mut ss) = (mule.session(chunk), stop.session(chunk));
            run_budgeted_contact(&mut mule, &mut sm, stop, &mut ss, None, budget, 0);
            let holders = [&rural, &mule, &urban].iter().filter(|n| n.complete.contains_key(&b.id())).count();
            prop_assert!(holders >= 1);
        }
    }
}

#[test]
fn priority_bundle_survives_short_contact() {
    // A contact with room for the handshake and one small frame still moves the request.
    let big = bundle("urban-1", "rural-1", BundleKind::ContentResponse, &[0; 4096], 1);
    let req = bundle("rural-1", "urban-1", BundleKind::TopicRequest, b"{\"topic\":\"x\"}", 2);
    let mut mule = MemNode::new("mule-1");
    mule.hold(&big);
    let mut rural = MemNode::new("rural-1");
    rural.hold(&req);
    let (mut sm, mut sr) = (mule.session(1024), rural.session(1024));
    run_budgeted_contact(&mut mule, &mut sm, &mut rural, &mut sr, None, 1700, 0);
    assert_eq!(mule.completions, vec![req.id()]);
    assert_eq!(rural.completions, vec![]);
    assert_eq!(big.meta.priority, Priority::Content);
}
