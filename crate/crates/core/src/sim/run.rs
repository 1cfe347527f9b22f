//! Discrete-event loop over real node stacks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;
use std::sync::Arc;

use super::config::{ms, CorpusConfig, Result, SimConfig, SimError, WorkloadEvent};
use super::metrics::{
    secs, BundleRow, ContactRow, Fate, FreshnessRow, RequestRow, SimReport, TransferRow,
};
use super::plan::{build_contact_plan, ContactWindow};
use crate::bundle::{BundleId, BundleKind, NodeId, NodeRole};
use crate::content::RequestStatus;
use crate::gateway::{synthetic_text, ArticleSource, CorpusSource, SyntheticSource};
use crate::node::{Node, NodeEvent, NodeSettings};
use crate::proto::{run_budgeted_contact, Frame, Session};
use crate::routing::RoleGraph;
use crate::Millis;

/// A finished run: measurements plus the nodes in their final state.
pub struct SimRun {
    pub report: SimReport,
    pub nodes: BTreeMap<NodeId, Node>,
}

// Same-time events run in this order: workload, wakes, contacts, samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    Workload,
    Wake,
    Contact,
    Sample,
}

#[derive(Debug)]
enum Job {
    Workload(usize),
    Wake(usize),
    Contact(usize),
    Sample,
}

struct Tracked {
    kind: BundleKind,
    source: NodeId,
    destination: NodeId,
    size: u64,
    created: Millis,
    delivered: Option<Millis>,
    expired: Option<Millis>,
}

fn node_err(e: impl std::fmt::Display) -> SimError {
    SimError::Node(e.to_string())
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = v.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = v.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

fn outcome_label(s: &Session) -> String {
    match s.abort_reason() {
        None => "done".into(),
        Some(r) => format!("{r:?}").to_lowercase(),
    }
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    bundles: BTreeMap<BundleId, Tracked>,
    contacts: Vec<ContactRow>,
    transfers: Vec<TransferRow>,
    freshness: Vec<FreshnessRow>,
    heap: BinaryHeap<Reverse<(Millis, Class, usize)>>,
    jobs: Vec<Job>,
    wakes: BTreeSet<(Millis, usize)>,
}

impl<'a> Sim<'a> {
    fn push(&mut self, at: Millis, class: Class, job: Job) {
        self.heap.push(Reverse((at, class, self.jobs.len())));
        self.jobs.push(job);
    }

    fn drain_events(&mut self, i: usize) {
        for (at, ev) in self.nodes[i].take_events() {
            match ev {
                NodeEvent::BundleCreated { id, kind, destination, len } => {
                    let source = self.nodes[i].id().clone();
                    self.bundles.entry(id).or_insert(Tracked {
                        kind,
                        source,
                        destination,
                        size: len,
                        created: at,
                        delivered: None,
                        expired: None,
                    });
                }
                NodeEvent::BundleDelivered { id, .. } => {
                    if let Some(b) = self.bundles.get_mut(&id) {
                        b.delivered.get_or_insert(at);
                    }
                }
                NodeEvent::BundleExpired { id } => {
                    if let Some(b) = self.bundles.get_mut(&id) {
                        b.expired.get_or_insert(at);
                    }
                }
                _ => {}
            }
        }
    }

    fn tick(&mut self, i: usize, now: Millis) -> Result<()> {
        let next = self.nodes[i].tick(now).map_err(node_err)?;
        self.drain_events(i);
        if let Some(t) = next {
            if self.wakes.insert((t, i)) {
                self.push(t, Class::Wake, Job::Wake(i));
            }
        }
        Ok(())
    }

    fn workload(&mut self, ev: &WorkloadEvent, now: Millis) -> Result<()> {
        let i = self.index[ev.node()];
        self.tick(i, now)?;
        match ev {
            WorkloadEvent::Request { topic, .. } => {
                self.nodes[i].request_topic(topic, now).map_err(node_err)?;
            }
            WorkloadEvent::Publish { title, size_bytes, .. } => {
                let body = synthetic_text(self.cfg.seed, title, (*size_bytes).max(title.len() + 3));
                self.nodes[i].publish(title, &body, now).map_err(node_err)?;
            }
        }
        self.drain_events(i);
        Ok(())
    }

    fn contact(&mut self, n: usize, w: &ContactWindow) -> Result<()> {
        let now = w.start_ms;
        let (si, mi) = (self.index[&w.stop], self.index[&w.mule_id]);
        self.tick(si, now)?;
        self.tick(mi, now)?;
        let (stop, mule) = pair_mut(&mut self.nodes, si, mi);
        let mut ss = stop.begin_session(now);
        let mut sm = mule.begin_session(now);
        let beacon = Frame::Beacon { node: mule.id().clone(), role: NodeRole::Mule };
        let out = run_budgeted_contact(stop, &mut ss, mule, &mut sm, Some(beacon), w.byte_budget, now);
        stop.session_closed(&ss, now);
        mule.session_closed(&sm, now);

        // rows for every bundle a sender planned, even if no byte got through
        let mut moved: BTreeMap<(bool, BundleId), (u64, u64, u64)> = BTreeMap::new();
        for (from_stop, sender) in [(true, &ss), (false, &sm)] {
            for e in sender.plan().entries {
                moved.insert((from_stop, e.id), (e.total_len, e.start_offset, 0));
            }
        }
        for (&key, &bytes) in &out.chunk_bytes {
            moved.entry(key).or_insert((0, 0, 0)).2 += bytes;
        }
        for ((from_stop, id), (total, start, bytes)) in moved {
            let (from, to, receiver) =
                if from_stop { (stop.id(), mule.id(), &sm) } else { (mule.id(), stop.id(), &ss) };
            self.transfers.push(TransferRow {
                contact: n,
                at_s: secs(now),
                from: from.to_string(),
                to: to.to_string(),
                bundle_id: id.to_hex(),
                total_bytes: total,
                start_offset: start,
                bytes,
                completed: receiver.completed().contains(&id),
            });
        }
        let payload = out.payload_bytes();
        self.contacts.push(ContactRow {
            contact: n,
            mule: w.mule_id.to_string(),
            stop: w.stop.to_string(),
            start_s: secs(now),
            duration_s: secs(w.duration_ms),
            byte_budget: w.byte_budget,
            bytes_used: out.bytes_used,
            setup_bytes: out.setup_bytes,
            payload_bytes: payload,
            goodput_bps: payload as f64 / secs(w.duration_ms),
            frames: out.frames_delivered,
            budget_exhausted: out.budget_exhausted,
            aborted: ss.abort_reason().is_some() || sm.abort_reason().is_some(),
            stop_outcome: outcome_label(&ss),
            mule_outcome: outcome_label(&sm),
            completed: ss.completed().len() + sm.completed().len(),
            resumed: ss.resumed().len() + sm.resumed().len(),
        });
        self.drain_events(si);
        self.drain_events(mi);
        self.tick(si, now)?;
        self.tick(mi, now)?;
        Ok(())
    }

    fn sample(&mut self, now: Millis) {
        for s in &self.cfg.stops {
            if s.role != NodeRole::Rural {
                continue;
            }
            let node = &self.nodes[self.index[&s.node]];
            let latest = node.content().and_then(|c| c.latest_update());
            self.freshness.push(FreshnessRow {
                t_s: secs(now),
                node: s.node.to_string(),
                age_s: latest.map(|u| secs(now.saturating_sub(u))),
            });
        }
    }

    fn fate(&self, id: &BundleId, b: &Tracked) -> (Fate, Option<String>) {
        let mut complete = Vec::new();
        let mut partial = 0;
        for n in &self.nodes {
            match n.store().get(id) {
                Some(e) if e.is_complete() => complete.push(n.id().to_string()),
                Some(_) => partial += 1,
                None => {}
            }
        }
        let custodian = (complete.len() == 1).then(|| complete[0].clone());
        let fate = match (b.delivered, complete.len()) {
            (Some(_), 0) => Fate::Delivered,
            (Some(_), _) | (None, 2..) => Fate::Duplicated,
            (None, 1) if partial == 0 => Fate::InCustody,
            (None, 1) => Fate::PartialInFlight,
            (None, 0) if b.expired.is_some() => Fate::Expired,
            (None, 0) => Fate::Lost,
        };
        (fate, custodian)
    }

    fn report(&self, plan: Vec<ContactWindow>) -> SimReport {
        let bundles = self
            .bundles
            .iter()
            .map(|(id, b)| {
                let (fate, custodian) = self.fate(id, b);
                BundleRow {
                    bundle_id: id.to_hex(),
                    kind: b.kind.as_str(),
                    source: b.source.to_string(),
                    destination: b.destination.to_string(),
                    size_bytes: b.size,
                    created_s: secs(b.created),
                    delivered_s: b.delivered.map(secs),
                    latency_s: b.delivered.map(|d| secs(d - b.created)),
                    expired_s: b.expired.map(secs),
                    fate,
                    custodian,
                }
            })
            .collect();
        let mut requests = Vec::new();
        for s in &self.cfg.stops {
            let Some(content) = self.nodes[self.index[&s.node]].content() else { continue };
            for r in content.requests().filter(|r| r.requester == s.node) {
                let picked = r.history.iter().find(|(st, _)| *st == RequestStatus::InTransit).map(|(_, t)| secs(*t));
                requests.push(RequestRow {
                    request_id: r.request_id.clone(),
                    node: s.node.to_string(),
                    topic: r.topic.clone(),
                    created_s: secs(r.created_at),
                    picked_up_s: picked,
                    status: r.status.label(),
                    reason: match &r.status {
                        RequestStatus::Failed(m) => Some(m.clone()),
                        _ => None,
                    },
                    resolved_s: r.resolved_at.map(secs),
                    rtt_s: match (&r.status, r.resolved_at) {
                        (RequestStatus::Fulfilled, Some(t)) => Some(secs(t - r.created_at)),
                        _ => None,
                    },
                });
            }
        }
        requests.sort_by(|a, b| a.created_s.total_cmp(&b.created_s).then_with(|| a.request_id.cmp(&b.request_id)));
        SimReport {
            config: self.cfg.clone(),
            plan,
            bundles,
            requests,
            contacts: self.contacts.clone(),
            transfers: self.transfers.clone(),
            freshness: self.freshness.clone(),
        }
    }
}

fn source_for(cfg: &SimConfig) -> Box<dyn ArticleSource> {
    match &cfg.corpus {
        CorpusConfig::Synthetic { min_bytes, max_bytes } => {
            Box::new(SyntheticSource { seed: cfg.seed, min_len: *min_bytes, max_len: *max_bytes })
        }
        CorpusConfig::Dir(dir) => Box::new(CorpusSource::new(dir)),
    }
}

/// Runs the scenario with node state under `work_dir/nodes`, which is
/// cleared first. Only simulated time is used.
pub fn run_sim(cfg: &SimConfig, work_dir: &Path) -> Result<SimRun> {
    let plan = build_contact_plan(cfg)?;
    let end = cfg.duration_ms();
    let root = work_dir.join("nodes");
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| SimError::Io(e.to_string()))?;
    }

    let mules = cfg.mule_ids();
    let members: Vec<(NodeId, NodeRole)> = cfg
        .stops
        .iter()
        .map(|s| (s.node.clone(), s.role))
        .chain(mules.iter().map(|m| (m.clone(), NodeRole::Mule)))
        .collect();
    let graph = Arc::new(RoleGraph::new(members.clone()).map_err(|e| SimError::InvalidConfig(e.to_string()))?);
    let gateway = cfg.gateway().cloned();
    let rurals: Vec<NodeId> =
        cfg.stops.iter().filter(|s| s.role == NodeRole::Rural).map(|s| s.node.clone()).collect();

    let mut nodes = Vec::new();
    let mut index = BTreeMap::new();
    for (id, role) in members {
        let mut s = NodeSettings::new(id.clone(), role);
        s.store.sync = false;
        s.session.chunk_size = cfg.chunk_size;
        s.request_ttl_ms = ms(cfg.request_ttl_s);
        s.content_ttl_ms = ms(cfg.content_ttl_s);
        match role {
            NodeRole::Rural => {
                s.gateway = gateway.clone();
                s.sync_to = gateway.iter().cloned().collect();
            }
            NodeRole::Urban => s.sync_to = rurals.clone(),
            NodeRole::Mule => {}
        }
        let source = (role == NodeRole::Urban).then(|| source_for(cfg));
        let node = Node::open(root.join(id.as_str()), s, graph.clone(), source, 0).map_err(node_err)?;
        index.insert(id, nodes.len());
        nodes.push(node);
    }

    let mut sim = Sim {
        cfg,
        nodes,
        index,
        bundles: BTreeMap::new(),
        contacts: Vec::new(),
        transfers: Vec::new(),
        freshness: Vec::new(),
        heap: BinaryHeap::new(),
        jobs: Vec::new(),
        wakes: BTreeSet::new(),
    };
    for (i, ev) in cfg.workload.iter().enumerate() {
        let at = ms(ev.at_s());
        if at <= end {
            sim.push(at, Class::Workload, Job::Workload(i));
        }
    }
    for (n, w) in plan.iter().enumerate() {
        sim.push(w.start_ms, Class::Contact, Job::Contact(n));
    }
    let step = ms(cfg.freshness_interval_s);
    if let Some(last) = end.checked_div(step) {
        for k in 0..=last {
            sim.push(k * step, Class::Sample, Job::Sample);
        }
    }

    while let Some(Reverse((at, _, j))) = sim.heap.pop() {
        if at > end {
            break;
        }
        match sim.jobs[j] {
            Job::Workload(i) => sim.workload(&cfg.workload[i], at)?,
            Job::Wake(i) => {
                sim.wakes.remove(&(at, i));
                sim.tick(i, at)?;
            }
            Job::Contact(n) => sim.contact(n, &plan[n])?,
            Job::Sample => sim.sample(at),
        }
    }
    for i in 0..sim.nodes.len() {
        sim.tick(i, end)?;
    }

    let report = sim.report(plan);
    let ids: Vec<NodeId> = sim.nodes.iter().map(|n| n.id().clone()).collect();
    let nodes = ids.into_iter().zip(sim.nodes).collect();
    Ok(SimRun { report, nodes })
}
