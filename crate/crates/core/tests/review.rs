use std::sync::Arc;

use pinalite::harness::{bundled_spec, gen_population, ingest_population};
use pinalite::hashing::Salt;
use pinalite::obfuscator::{classify, obfuscate, ObfuscationReport, Overrides};
use pinalite::review::{ReviewServer, ReviewSession};
use pinalite::script::{record_from_trace, serialize_script, Script};
use pinalite::server::{Aggregator, ServerConfig};
use serde_json::{json, Value};

fn fixture(dir: &std::path::Path) -> (Script, ObfuscationReport) {
    let spec = bundled_spec("banking").unwrap();
    let pop = gen_population(&spec, 5, 2).unwrap();
    let agg = Aggregator::new(ServerConfig::new(dir.join("state.jsonl")), Salt::generate()).unwrap();
    ingest_population(&agg, &pop, 5).unwrap();
    let script = record_from_trace(&pop.trace(0)).unwrap();
    let report = classify(&script, &agg, &pop.users[0].user_id).unwrap();
    (script, report)
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> Value {
    agent().get(url).call().unwrap().body_mut().read_json().unwrap()
}

fn post(url: &str, body: Value) -> (u16, Value) {
    let mut r = agent().post(url).send_json(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

#[test]
fn toggle_and_confirm_match_offline_share() {
    let dir = tempfile::tempdir().unwrap();
    let (script, report) = fixture(dir.path());
    let out = dir.path().join("shared.json");
    let session = Arc::new(ReviewSession::new(script.clone(), report.clone(), &out));
    let server = ReviewServer::start(session, "127.0.0.1:0".parse().unwrap()).unwrap();
    let base = server.url();

    let listed = get(&format!("{base}/api/report"));
    assert_eq!(listed["entries"].as_array().unwrap().len(), report.entries.len());

    // Hide "Done" and reveal the first personal entry.
    let done = report.entries.iter().find(|e| e.content == "Done").unwrap();
    let personal = report.entries.iter().find(|e| !e.final_public).unwrap();
    let (status, entry) = post(&format!("{base}/api/toggle"), json!({"entry_id": done.entry_id, "public": false}));
    assert_eq!(status, 200);
    assert_eq!(entry["final_public"], false);
    assert_eq!(entry["locations"].as_array().unwrap().len(), done.locations.len());
    post(&format!("{base}/api/toggle"), json!({"entry_id": personal.entry_id, "public": true}));
    assert_eq!(post(&format!("{base}/api/toggle"), json!({"entry_id": 9999, "public": true})).0, 404);
    assert_eq!(post(&format!("{base}/api/toggle"), json!({"entry_id": "x"})).0, 400);

    // Every location of the toggled entry renders hidden in the preview.
    let preview = get(&format!("{base}/api/script-preview"));
    let slots: Vec<&Value> = preview["steps"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|s| s["slots"].as_array().unwrap())
        .filter(|s| s["entry_id"] == done.entry_id)
        .collect();
    assert_eq!(slots.len(), done.locations.len());
    assert!(slots.iter().all(|s| s["public"] == false));

    let (status, confirmed) = post(&format!("{base}/api/confirm"), json!({}));
    assert_eq!(status, 200);
    assert_eq!(confirmed["shared_path"], out.to_str().unwrap());
    let outcome = server.wait_confirmed().unwrap();
    assert_eq!(outcome.shared_path, out);

    let mut offline = report.clone();
    offline
        .apply_overrides(&Overrides::from([(done.entry_id, false), (personal.entry_id, true)]))
        .unwrap();
    let expected = serialize_script(&obfuscate(&script, &offline).unwrap().script);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), expected);
}

#[test]
fn untouched_review_equals_plain_share() {
    let dir = tempfile::tempdir().unwrap();
    let (script, report) = fixture(dir.path());
    let out = dir.path().join("shared.json");
    let server = ReviewServer::start(
        Arc::new(ReviewSession::new(script.clone(), report.clone(), &out)),
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    post(&format!("{}/api/confirm", server.url()), json!({}));
    server.wait_confirmed().unwrap();
    let expected = serialize_script(&obfuscate(&script, &report).unwrap().script);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), expected);
}

#[test]
fn confirm_fails_closed_on_leak() {
    // "Pay" stays visible inside the public "Pay bills" and "Pay to".
    let dir = tempfile::tempdir().unwrap();
    let (script, report) = fixture(dir.path());
    let out = dir.path().join("shared.json");
    let server = ReviewServer::start(
        Arc::new(ReviewSession::new(script, report.clone(), &out)),
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let done = report.entries.iter().find(|e| e.content == "Pay").unwrap();
    post(&format!("{}/api/toggle", server.url()), json!({"entry_id": done.entry_id, "public": false}));
    let (status, body) = post(&format!("{}/api/confirm", server.url()), json!({}));
    assert_eq!(status, 409, "{body}");
    assert!(!out.exists());
    server.stop();
}

#[test]
fn refuses_non_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let (script, report) = fixture(dir.path());
    let session = Arc::new(ReviewSession::new(script, report, dir.path().join("o.json")));
    assert!(ReviewServer::start(session, "0.0.0.0:0".parse().unwrap()).is_err());
}
