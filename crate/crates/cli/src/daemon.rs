//! Long-running node: session listener or beacon receiver, periodic ticks and
//! the HTTP API, all sharing one node behind a lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::Write;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::watch;
use tokio::task::JoinSet;

use dtn_learn::gateway::{ArticleSource, CorpusSource, SyntheticSource};
use dtn_learn::node::{Node, NodeError, NodeEvent};
use dtn_learn::proto::{Applied, Endpoint, Event, Frame, Session};
use dtn_learn::{Millis, NodeId, NodeRole};

use crate::config::{CorpusChoice, NodeConfig};
use crate::link::drive_session;

#[derive(Debug, thiserror::Error)]
pub enum DaemonError {
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind { what: &'static str, addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn now_ms() -> Millis {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as Millis)
}

/// Appends node events as JSON lines.
struct EventLog {
    file: File,
    sync: bool,
}

impl EventLog {
    fn write(&mut self, node: &NodeId, at: Millis, ev: &NodeEvent) {
        let mut v = serde_json::to_value(ev).expect("event serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.insert("at".into(), at.into());
            obj.insert("node".into(), node.as_str().into());
        }
        let line = format!("{v}\n");
        let res = self.file.write_all(line.as_bytes()).and_then(|_| if self.sync { self.file.sync_data() } else { Ok(()) });
        if let Err(e) = res {
            tracing::warn!(error = %e, "cannot append to events.log");
        }
    }
}

struct Inner {
    node: Node,
    log: EventLog,
}

/// The node plus everything the daemon tasks share.
pub struct Shared {
    pub cfg: NodeConfig,
    inner: Mutex<Inner>,
    beacon: watch::Sender<bool>,
}

impl Shared {
    /// Runs `f` on the node and logs whatever events it produced.
    pub fn with_node<R>(&self, f: impl FnOnce(&mut Node, Millis) -> R) -> R {
        let mut g = self.inner.lock().expect("node lock poisoned");
        let now = now_ms();
        let r = f(&mut g.node, now);
        let id = g.node.id().clone();
        for (at, ev) in g.node.take_events() {
            g.log.write(&id, at, &ev);
        }
        r
    }

    /// Feeds one event to a session and applies the resulting actions.
    pub fn step(&self, session: &mut Session, event: Event) -> Applied {
        self.with_node(|node, now| {
            let actions = session.step(now, event, node.chunk_source());
            node.apply(session, now, actions)
        })
    }

    pub fn beacon_enabled(&self) -> bool {
        *self.beacon.borrow()
    }

    pub fn set_beacon(&self, on: bool) {
        self.beacon.send_replace(on);
    }

    pub fn beacon_watch(&self) -> watch::Receiver<bool> {
        self.beacon.subscribe()
    }
}

fn source_for(cfg: &NodeConfig) -> Option<Box<dyn ArticleSource>> {
    match cfg.corpus.as_ref()? {
        CorpusChoice::Dir(p) => Some(Box::new(CorpusSource::new(p.clone()))),
        CorpusChoice::Synthetic { seed, min_bytes, max_bytes } => {
            Some(Box::new(SyntheticSource { seed: *seed, min_len: *min_bytes, max_len: *max_bytes }))
        }
    }
}

/// Opens the node state and event log.
pub fn open(cfg: NodeConfig) -> Result<Arc<Shared>, DaemonError> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    let node = Node::open(&cfg.data_dir, cfg.settings(), Arc::new(cfg.graph.clone()), source_for(&cfg), now_ms())?;
    let file = OpenOptions::new().create(true).append(true).open(cfg.data_dir.join("events.log"))?;
    let (beacon, _) = watch::channel(cfg.beacon_enabled && cfg.role == NodeRole::Mule);
    let shared = Arc::new(Shared { inner: Mutex::new(Inner { node, log: EventLog { file, sync: cfg.sync } }), beacon, cfg });
    // events from recovery
    shared.with_node(|_, _| ());
    Ok(shared)
}

async fn bind_tcp(what: &'static str, addr: SocketAddr) -> Result<TcpListener, DaemonError> {
    TcpListener::bind(addr).await.map_err(|source| DaemonError::Bind { what, addr, source })
}

async fn bind_udp(what: &'static str, addr: SocketAddr) -> Result<UdpSocket, DaemonError> {
    UdpSocket::bind(addr).await.map_err(|source| DaemonError::Bind { what, addr, source })
}

/// Runs until `shutdown` resolves.
pub async fn run(cfg: NodeConfig, shutdown: impl Future<Output = ()>) -> Result<(), DaemonError> {
    let shared = open(cfg)?;
    let cfg = &shared.cfg;
    let mut tasks = JoinSet::new();

    let api = match cfg.api_bind {
        Some(a) => Some(bind_tcp("api", a).await?),
        None => None,
    };
    if cfg.role == NodeRole::Mule {
        let addr = cfg.listen.expect("validated");
        let listener = bind_tcp("session listener", addr).await?;
        let local = listener.local_addr()?;
        // beacons leave from the session port so stops can connect back to it
        let sock = bind_udp("beacon sender", local).await?;
        sock.set_broadcast(true)?;
        tracing::info!(node = %cfg.id, session = %local, "mule listening");
        tasks.spawn(accept_loop(shared.clone(), listener));
        tasks.spawn(beacon_loop(shared.clone(), sock));
    } else {
        let addr = cfg.beacon_listen.expect("validated");
        let sock = bind_udp("beacon listener", addr).await?;
        tracing::info!(node = %cfg.id, beacon = %sock.local_addr()?, "listening for beacons");
        tasks.spawn(listen_beacons(shared.clone(), sock));
    }
    tasks.spawn(tick_loop(shared.clone()));
    if let Some(listener) = api {
        tracing::info!(api = %listener.local_addr()?, "api listening");
        let app = crate::api::router(shared.clone());
        tasks.spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!(error = %e, "api server stopped");
            }
        });
    }

    shutdown.await;
    tasks.shutdown().await;
    shared.with_node(|_, _| ());
    tracing::info!(node = %shared.cfg.id, "stopped");
    Ok(())
}

async fn tick_loop(shared: Arc<Shared>) {
    let mut every = tokio::time::interval(Duration::from_millis(shared.cfg.tick_interval_ms));
    every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        every.tick().await;
        if let Err(e) = shared.with_node(|n, now| n.tick(now)) {
            tracing::warn!(error = %e, "tick failed");
        }
    }
}

async fn beacon_loop(shared: Arc<Shared>, sock: UdpSocket) {
    let frame = Frame::Beacon { node: shared.cfg.id.clone(), role: NodeRole::Mule }.encode();
    let mut every = tokio::time::interval(Duration::from_millis(shared.cfg.beacon_interval_ms));
    loop {
        every.tick().await;
        if !shared.beacon_enabled() {
            continue;
        }
        for t in &shared.cfg.beacon_targets {
            if let Err(e) = sock.send_to(&frame, t).await {
                tracing::debug!(target = %t, error = %e, "beacon not sent");
            }
        }
    }
}

/// Mules serve one session at a time, and only while beaconing.
async fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(100)).await;
                continue;
            }
        };
        if !shared.beacon_enabled() {
            continue;
        }
        tracing::info!(%peer, "session accepted");
        let cancel = shared.beacon_watch();
        drive_session(&shared, stream, false, Some(cancel)).await;
    }
}

#[derive(Default)]
struct Contacts {
    active: bool,
    last_end: BTreeMap<NodeId, Millis>,
}

/// Stops open a session to a mule they hear, one at a time.
async fn listen_beacons(shared: Arc<Shared>, sock: UdpSocket) {
    let contacts = Arc::new(Mutex::new(Contacts::default()));
    let mut buf = vec![0u8; 2048];
    loop {
        let (n, from) = match sock.recv_from(&mut buf).await {
            Ok(x) => x,
            Err(e) => {
                tracing::debug!(error = %e, "beacon receive failed");
                continue;
            }
        };
        let Ok((Frame::Beacon { node, role: NodeRole::Mule }, _)) = Frame::decode(&buf[..n]) else { continue };
        if shared.cfg.graph.role_of(&node) != Some(NodeRole::Mule) {
            continue;
        }
        shared.with_node(|n, now| n.note_peer(&node, now));
        let now = now_ms();
        {
            let mut c = contacts.lock().expect("contacts lock");
            let recent = c.last_end.get(&node).is_some_and(|&t| now < t + shared.cfg.contact_retry_ms);
            if c.active || recent {
                continue;
            }
            c.active = true;
        }
        let addr = shared.cfg.addr_of(&node).unwrap_or(from);
        let (shared, contacts) = (shared.clone(), contacts.clone());
        tokio::spawn(async move {
            let connect = tokio::time::timeout(Duration::from_secs(2), TcpStream::connect(addr)).await;
            match connect {
                Ok(Ok(stream)) => {
                    tracing::info!(mule = %node, %addr, "contact");
                    drive_session(&shared, stream, true, None).await;
                }
                Ok(Err(e)) => tracing::debug!(mule = %node, error = %e, "connect failed"),
                Err(_) => tracing::debug!(mule = %node, "connect timed out"),
            }
            let mut c = contacts.lock().expect("contacts lock");
            c.active = false;
            c.last_end.insert(node, now_ms());
        });
    }
}
