#![allow(dead_code)]

use std::fs;
use std::net::{SocketAddr, TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use dtn_learn::content::{AppMessage, Origin};
use dtn_learn::store::{BundleStore, StoreConfig};
use dtn_learn::{Bundle, BundleKind, NodeId};
use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_dtn-learn");

pub fn tcp_port() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

pub fn udp_port() -> SocketAddr {
    UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

/// Addresses for a rural, mule and urban node on loopback.
#[derive(Clone, Debug)]
pub struct Net {
    pub rural_beacon: SocketAddr,
    pub urban_beacon: SocketAddr,
    pub mule_session: SocketAddr,
    pub rural_api: SocketAddr,
    pub urban_api: SocketAddr,
    pub mule_api: SocketAddr,
}

impl Net {
    pub fn new() -> Self {
        Net {
            rural_beacon: udp_port(),
            urban_beacon: udp_port(),
            mule_session: tcp_port(),
            rural_api: tcp_port(),
            urban_api: tcp_port(),
            mule_api: tcp_port(),
        }
    }

    fn nodes(&self) -> String {
        format!(
            r#"
[[nodes]]
id = "rural-1"
role = "rural"

[[nodes]]
id = "urban-1"
role = "urban"

[[nodes]]
id = "mule-1"
role = "mule"
addr = "{}"
"#,
            self.mule_session
        )
    }

    pub fn rural(&self, dir: &Path, extra: &str) -> String {
        format!(
            "id = \"rural-1\"\nrole = \"rural\"\ndata_dir = {:?}\nbeacon_listen = \"{}\"\napi_bind = \"{}\"\ngateway = \"urban-1\"\ntick_interval_ms = 100\ncontact_retry_ms = 300\n{extra}\n{}",
            dir.display().to_string(),
            self.rural_beacon,
            self.rural_api,
            self.nodes()
        )
    }

    pub fn urban(&self, dir: &Path, extra: &str) -> String {
        format!(
            "id = \"urban-1\"\nrole = \"urban\"\ndata_dir = {:?}\nbeacon_listen = \"{}\"\napi_bind = \"{}\"\ncorpus_backend = \"synthetic\"\ncorpus_min_bytes = 20000\ncorpus_max_bytes = 40000\ntick_interval_ms = 100\ncontact_retry_ms = 300\n{extra}\n{}",
            dir.display().to_string(),
            self.urban_beacon,
            self.urban_api,
            self.nodes()
        )
    }

    pub fn mule(&self, dir: &Path, extra: &str) -> String {
        format!(
            "id = \"mule-1\"\nrole = \"mule\"\ndata_dir = {:?}\nlisten = \"{}\"\napi_bind = \"{}\"\nbeacon_targets = [\"{}\", \"{}\"]\nbeacon_interval_ms = 100\ntick_interval_ms = 100\n{extra}\n{}",
            dir.display().to_string(),
            self.mule_session,
            self.mule_api,
            self.rural_beacon,
            self.urban_beacon,
            self.nodes()
        )
    }
}

/// A daemon child process, killed on drop.
pub struct Daemon {
    pub child: Child,
    pub api: SocketAddr,
    pub data_dir: PathBuf,
    config: PathBuf,
}

impl Daemon {
    pub fn start(config_text: &str, config_path: &Path, data_dir: &Path, api: SocketAddr) -> Self {
        fs::write(config_path, config_text).unwrap();
        let child = spawn(config_path);
        let d = Daemon { child, api, data_dir: data_dir.to_path_buf(), config: config_path.to_path_buf() };
        d.wait_ready();
        d
    }

    pub fn wait_ready(&self) {
        wait_for(Duration::from_secs(20), || get(self.api, "/api/node/status").is_ok());
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    pub fn restart(&mut self) {
        self.kill();
        self.child = spawn(&self.config);
        self.wait_ready();
    }

    /// Restarts without waiting for the API.
    pub fn respawn(&mut self) {
        self.kill();
        self.child = spawn(&self.config);
    }

    pub fn events(&self) -> Vec<Value> {
        let text = fs::read_to_string(self.data_dir.join("events.log")).unwrap_or_default();
        // a kill can leave a torn final line
        text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        self.kill();
    }
}

fn spawn(config: &Path) -> Child {
    Command::new(BIN)
        .args(["run", config.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder().timeout(Duration::from_secs(5)).build().unwrap()
}

pub fn get(api: SocketAddr, path: &str) -> Result<(u16, Value), reqwest::Error> {
    let r = client().get(format!("http://{api}{path}")).send()?;
    let code = r.status().as_u16();
    Ok((code, r.json()?))
}

pub fn post(api: SocketAddr, path: &str, body: Value) -> (u16, Value) {
    let r = client().post(format!("http://{api}{path}")).json(&body).send().unwrap();
    let code = r.status().as_u16();
    (code, r.json().unwrap())
}

pub fn wait_for(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    false
}

/// Puts content updates for rural-1 straight into the mule's store.
pub fn preload_mule(dir: &Path, chunk: u64, count: usize, size: usize) -> Vec<(String, String)> {
    let mut store = BundleStore::open(dir.join("store"), StoreConfig { chunk_size: chunk, ..Default::default() }).unwrap();
    let mut titles = Vec::new();
    for i in 0..count {
        let title = format!("Lesson {i}");
        let body = dtn_learn::gateway::synthetic_text(i as u64, &title, size);
        let msg = AppMessage::ContentUpdate { title: title.clone(), version: 1, body: body.clone(), origin: Origin::LocalAuthor };
        let b = Bundle::create(
            NodeId::new("urban-1").unwrap(),
            NodeId::new("rural-1").unwrap(),
            BundleKind::ContentUpdate,
            BundleKind::ContentUpdate.default_priority(),
            msg.to_bytes(),
            30 * 24 * 3600 * 1000,
            dtn_learn_cli::daemon::now_ms() + i as u64,
            &Default::default(),
        )
        .unwrap();
        store.put(&b, dtn_learn_cli::daemon::now_ms(), None).unwrap();
        titles.push((title, body));
    }
    titles
}
