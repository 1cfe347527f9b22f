mod common;

use std::time::Duration;

use common::{get, post, preload_mule, wait_for, Daemon, Net};
use serde_json::json;

fn status_of(api: std::net::SocketAddr, request_id: &str) -> Option<String> {
    let (_, all) = get(api, "/api/requests").ok()?;
    all.as_array()?
        .iter()
        .find(|r| r["request_id"] == request_id)
        .map(|r| r["status"]["state"].as_str().unwrap_or_default().to_string())
}

#[test]
fn request_fulfilled_over_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let net = Net::new();
    let rural = Daemon::start(&net.rural(&p.join("r"), "sync = false"), &p.join("r.toml"), &p.join("r"), net.rural_api);
    let urban = Daemon::start(&net.urban(&p.join("u"), "sync = false"), &p.join("u.toml"), &p.join("u"), net.urban_api);
    let mule = Daemon::start(
        &net.mule(&p.join("m"), "beacon_enabled = false\nsync = false"),
        &p.join("m.toml"),
        &p.join("m"),
        net.mule_api,
    );

    let (code, r) = post(rural.api, "/api/requests", json!({"topic": "Photosynthesis"}));
    assert_eq!(code, 201);
    let id = r["request_id"].as_str().unwrap().to_string();

    // bus arrives: the request leaves the village
    post(mule.api, "/api/beacon", json!({"enabled": true}));
    assert!(wait_for(Duration::from_secs(20), || status_of(rural.api, &id).as_deref() != Some("pending_pickup")));
    // bus leaves, comes back later
    post(mule.api, "/api/beacon", json!({"enabled": false}));
    std::thread::sleep(Duration::from_millis(300));
    post(mule.api, "/api/beacon", json!({"enabled": true}));

    assert!(
        wait_for(Duration::from_secs(30), || status_of(rural.api, &id).as_deref() == Some("fulfilled")),
        "request stuck at {:?}",
        status_of(rural.api, &id)
    );
    let (code, item) = get(rural.api, "/api/content/Photosynthesis").unwrap();
    assert_eq!(code, 200);
    assert_eq!(item["origin"], "fetched_remote");
    assert!(item["body"].as_str().unwrap().len() >= 15_000);
    let (_, jobs) = get(urban.api, "/api/jobs").unwrap();
    assert!(jobs.as_array().unwrap().iter().all(|j| j["request_id"] != id.as_str()) || jobs[0]["state"]["state"] == "done");
    let (_, st) = get(rural.api, "/api/node/status").unwrap();
    assert_eq!(st["peer_last_seen"]["peer"], "mule-1");
}

#[test]
fn killed_rural_resumes_from_stored_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let net = Net::new();
    let titles = preload_mule(&p.join("m"), 16 * 1024, 1, 1_000_000);
    let mule = Daemon::start(
        &net.mule(&p.join("m"), "chunk_size = 16384\nlink_rate_bps = 2000000"),
        &p.join("m.toml"),
        &p.join("m"),
        net.mule_api,
    );
    let mut rural =
        Daemon::start(&net.rural(&p.join("r"), "chunk_size = 16384"), &p.join("r.toml"), &p.join("r"), net.rural_api);
    // 1 MB at 250 kB/s takes about four seconds; stop it part way
    std::thread::sleep(Duration::from_millis(1500));
    rural.kill();
    rural.restart();
    assert!(wait_for(Duration::from_secs(30), || get(rural.api, "/api/content/Lesson%200").is_ok_and(|r| r.0 == 200)));
    let (_, item) = get(rural.api, "/api/content/Lesson%200").unwrap();
    assert_eq!(item["body"].as_str().unwrap(), titles[0].1);

    let completed = rural.events().iter().filter(|e| e["event"] == "bundle_completed").count();
    assert_eq!(completed, 1);
    let resumed = |events: Vec<serde_json::Value>| {
        events
            .iter()
            .filter(|e| e["event"] == "session_closed")
            .any(|e| e["resumed"].as_array().is_some_and(|r| r.iter().any(|x| x[1].as_u64().unwrap_or(0) > 0)))
    };
    assert!(wait_for(Duration::from_secs(10), || resumed(mule.events())), "mule never resumed from a nonzero offset");
    assert!(wait_for(Duration::from_secs(10), || get(mule.api, "/api/node/status").unwrap().1["store"]["bundles"] == 0));
}
