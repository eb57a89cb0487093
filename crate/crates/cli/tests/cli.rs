use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use pinalite::harness::{bundled_spec, gen_population, Population};
use pinalite::hashing::Salt;
use pinalite::http::ServerHandle;
use pinalite::server::{Aggregator, ServerConfig};

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_pinalite"));
        c.env("PINALITE_HOME", self.path("home")).env_remove("PINALITE_SERVER_URL");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn population() -> Population {
    gen_population(&bundled_spec("banking").unwrap(), 6, 21).unwrap()
}

/// One directory of screen files per user.
fn write_screens(sb: &Sandbox, pop: &Population, u: usize) -> PathBuf {
    let dir = sb.path(&format!("screens-{u}"));
    std::fs::create_dir_all(&dir).unwrap();
    for (name, screen) in pop.visible_screens(u) {
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string(screen).unwrap()).unwrap();
    }
    dir
}

fn start_server(sb: &Sandbox) -> ServerHandle {
    let agg = Aggregator::new(ServerConfig::new(sb.path("state.jsonl")), Salt::generate()).unwrap();
    ServerHandle::start(Arc::new(agg), "127.0.0.1:0".parse().unwrap()).unwrap()
}

/// Populates the server and records the author's script; returns its path.
fn prepare(sb: &Sandbox, pop: &Population, url: &str) -> PathBuf {
    for u in 0..5 {
        let dir = write_screens(sb, pop, u);
        let out = sb.run(&["--server", url, "ingest", "--screens", s(&dir), "--user", pop.users[u].user_id.as_str()]);
        assert_eq!(code(&out), 0, "{out:?}");
    }
    let trace = sb.path("trace.json");
    std::fs::write(&trace, serde_json::to_string(&pop.trace(0)).unwrap()).unwrap();
    let script = sb.path("script.json");
    let out = sb.run(&["record", "--trace", s(&trace), "--out", s(&script)]);
    assert_eq!(code(&out), 0, "{out:?}");
    script
}

#[test]
fn record_and_validate() {
    let sb = Sandbox::new();
    let pop = population();
    let trace = sb.path("trace.json");
    std::fs::write(&trace, serde_json::to_string(&pop.trace(0)).unwrap()).unwrap();
    let script = sb.path("script.json");
    let out = sb.run(&["record", "--trace", s(&trace), "--out", s(&script)]);
    assert_eq!(code(&out), 0, "{out:?}");
    let out = sb.run(&["validate", "--script", s(&script)]);
    assert_eq!((code(&out), stdout(&out).trim()), (0, "ok"));

    std::fs::write(&trace, r#"{"name":"empty","events":[]}"#).unwrap();
    assert_eq!(code(&sb.run(&["record", "--trace", s(&trace), "--out", s(&script)])), 1);
    std::fs::write(&script, "{}").unwrap();
    assert_eq!(code(&sb.run(&["validate", "--script", s(&script)])), 1);
}

#[test]
fn ingest_share_run() {
    let sb = Sandbox::new();
    let pop = population();
    let server = start_server(&sb);
    let url = server.url();
    let script = prepare(&sb, &pop, &url);

    // Re-ingest is a no-op.
    let dir = sb.path("screens-0");
    let out = sb.run(&["--server", &url, "ingest", "--screens", s(&dir), "--user", pop.users[0].user_id.as_str()]);
    assert!(stdout(&out).contains("new 0"), "{}", stdout(&out));

    let shared = sb.path("shared.json");
    let report = sb.path("report.json");
    let out = sb.run(&["--server", &url, "share", "--script", s(&script), "--out", s(&shared), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = std::fs::read_to_string(&shared).unwrap();
    for p in pop.users[0].personal_strings() {
        assert!(!text.contains(&p), "leaked {p}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(report["counts"]["personal"].as_u64().unwrap() > 0);

    // Consumer run, then the rebuilt script runs on its own.
    let app = sb.path("app.json");
    std::fs::write(&app, serde_json::to_string(pop.app(5).unwrap().document()).unwrap()).unwrap();
    let rebuilt = sb.path("rebuilt.json");
    let out = sb.run(&["run", "--script", s(&shared), "--app", s(&app), "--rebuilt", s(&rebuilt)]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert_eq!(stdout(&out).lines().count(), 5);
    assert!(stdout(&out).contains(&pop.users[5].values["confirmation"][0]));
    let out = sb.run(&["run", "--script", s(&rebuilt), "--app", s(&app)]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(!stdout(&out).contains("\"used_alt_query\":true"));

    // Choose the consumer's second account.
    let second = &pop.users[5].values["acct"][1];
    let out = sb.run(&["run", "--script", s(&shared), "--app", s(&app), "--param", &format!("account={second}")]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("acct_2"));
    let out = sb.run(&["run", "--script", s(&shared), "--app", s(&app), "--param", "account=nope"]);
    assert_eq!(code(&out), 1);
    server.stop().unwrap();
}

fn share_with_review(sb: &Sandbox, url: &str, script: &Path, out: &Path, toggles: &[(usize, bool)]) {
    let mut child = sb
        .cmd()
        .args(["--server", url, "share", "--script", s(script), "--out", s(out), "--serve-review"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let review = loop {
        let line = lines.next().expect("review url printed").unwrap();
        if let Some(u) = line.strip_prefix("review at ") {
            break u.to_owned();
        }
    };
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    for (id, public) in toggles {
        let r = agent
            .post(format!("{review}/api/toggle"))
            .send_json(serde_json::json!({"entry_id": id, "public": public}))
            .unwrap();
        assert_eq!(r.status().as_u16(), 200);
    }
    let r = agent.post(format!("{review}/api/confirm")).send_json(serde_json::json!({})).unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert!(child.wait().unwrap().success());
}

#[test]
fn review_matches_cli_share() {
    let sb = Sandbox::new();
    let pop = population();
    let server = start_server(&sb);
    let url = server.url();
    let script = prepare(&sb, &pop, &url);

    let plain = sb.path("plain.json");
    let report = sb.path("report.json");
    let o = sb.run(&["--server", &url, "share", "--script", s(&script), "--out", s(&plain), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let reviewed = sb.path("reviewed.json");
    share_with_review(&sb, &url, &script, &reviewed, &[]);
    assert_eq!(std::fs::read(&plain).unwrap(), std::fs::read(&reviewed).unwrap());

    // Equivalent toggles and overrides produce identical bytes.
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    let id_of = |c: &str| entries.iter().find(|e| e["content"] == c).unwrap()["entry_id"].as_u64().unwrap() as usize;
    let reveal = entries.iter().find(|e| e["final_public"] == false).unwrap()["entry_id"].as_u64().unwrap() as usize;
    let toggles = [(id_of("Done"), false), (reveal, true)];
    let overrides = sb.path("overrides.json");
    std::fs::write(&overrides, format!(r#"{{"{}": false, "{}": true}}"#, toggles[0].0, toggles[1].0)).unwrap();
    let via_cli = sb.path("via-cli.json");
    let o = sb.run(&[
        "--server", &url, "share", "--script", s(&script), "--out", s(&via_cli), "--overrides", s(&overrides),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let via_ui = sb.path("via-ui.json");
    share_with_review(&sb, &url, &script, &via_ui, &toggles);
    assert_eq!(std::fs::read(&via_cli).unwrap(), std::fs::read(&via_ui).unwrap());
    assert_ne!(std::fs::read(&via_cli).unwrap(), std::fs::read(&plain).unwrap());

    // Hiding "Pay" would leave it visible inside "Pay bills": leak sweep exit code.
    std::fs::write(&overrides, format!(r#"{{"{}": false}}"#, id_of("Pay"))).unwrap();
    let o = sb.run(&[
        "--server", &url, "share", "--script", s(&script), "--out", s(&sb.path("x.json")), "--overrides", s(&overrides),
    ]);
    assert_eq!(code(&o), 3, "{o:?}");
    server.stop().unwrap();
}

#[test]
fn unreachable_server_refuses_to_share() {
    let sb = Sandbox::new();
    let pop = population();
    let trace = sb.path("trace.json");
    std::fs::write(&trace, serde_json::to_string(&pop.trace(0)).unwrap()).unwrap();
    let script = sb.path("script.json");
    sb.run(&["record", "--trace", s(&trace), "--out", s(&script)]);
    let out_path = sb.path("shared.json");
    let o = sb.run(&["--server", "http://127.0.0.1:9", "share", "--script", s(&script), "--out", s(&out_path)]);
    assert_eq!(code(&o), 2);
    assert!(!out_path.exists());
    let o = sb.run(&["share", "--script", s(&script), "--out", s(&out_path)]);
    assert_eq!(code(&o), 2, "no server configured");
}

#[test]
fn ingest_errors() {
    let sb = Sandbox::new();
    let o = sb.run(&["--server", "http://127.0.0.1:9", "ingest", "--screens", s(&sb.path("missing"))]);
    assert_eq!(code(&o), 2);
    let dir = sb.path("bad");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("a.json"), r#"{"package":"p"}"#).unwrap();
    let o = sb.run(&["--server", "http://127.0.0.1:9", "ingest", "--screens", s(&dir)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn identity_persists_until_reset() {
    let sb = Sandbox::new();
    let a = stdout(&sb.run(&["id"]));
    assert_eq!(a, stdout(&sb.run(&["id"])));
    let b = stdout(&sb.run(&["id", "--reset"]));
    assert_ne!(a, b);
    assert_eq!(b, stdout(&sb.run(&["id"])));
}

#[test]
fn eval_bundled() {
    let sb = Sandbox::new();
    let o = sb.run(&["eval", "--spec", "banking", "--spec", "coffee", "--spec", "ride_hailing", "--users", "5", "--t", "0.5"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 4);
    for app in ["banking-payment", "coffee-ordering", "ride-hailing"] {
        assert!(table.contains(app));
    }
    let o = sb.run(&["eval", "--spec", "coffee", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["recall"], 1.0);
    // Same inputs, same output.
    assert_eq!(o.stdout, sb.run(&["eval", "--spec", "coffee", "--json"]).stdout);
    assert_eq!(code(&sb.run(&["eval", "--spec", "coffee", "--t", "1.5"])), 1);
    assert_eq!(code(&sb.run(&["eval", "--spec", "no-such-app"])), 2);
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn spawn_serve(sb: &Sandbox, config: &Path) -> (std::process::Child, String) {
    let mut child = sb
        .cmd()
        .args(["serve", "--config", s(config), "--port", &free_port().to_string()])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let line = lines.next().expect("listening line").unwrap();
    let url = line.strip_prefix("listening on ").expect("listening line").to_owned();
    (child, url)
}

fn terminate(child: &mut std::process::Child) {
    let ok = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(ok.success());
    assert!(child.wait().unwrap().success());
}

#[test]
fn serve_persists_across_restart() {
    let sb = Sandbox::new();
    let config = sb.path("server.toml");
    std::fs::write(&config, "persistence_path = \"data/state.jsonl\"\n").unwrap();
    let (mut child, url) = spawn_serve(&sb, &config);
    let health: serde_json::Value = ureq::get(format!("{url}/v1/health")).call().unwrap().body_mut().read_json().unwrap();
    assert_eq!(health["status"], "ok");
    assert!(sb.path("data/salt.key").exists(), "missing salt file is created");

    let pop = population();
    let dir = write_screens(&sb, &pop, 0);
    let o = sb.run(&["--server", &url, "ingest", "--screens", s(&dir)]);
    assert_eq!(code(&o), 0, "{o:?}");
    terminate(&mut child);
    assert!(sb.path("data/state.jsonl").exists());

    let (mut child, url) = spawn_serve(&sb, &config);
    let health: serde_json::Value = ureq::get(format!("{url}/v1/health")).call().unwrap().body_mut().read_json().unwrap();
    assert!(health["entries"].as_u64().unwrap() > 0);
    let o = sb.run(&["--server", &url, "ingest", "--screens", s(&dir)]);
    assert!(stdout(&o).contains("new 0"), "{}", stdout(&o));
    terminate(&mut child);

    std::fs::write(&config, "persistence_path = 3\n").unwrap();
    assert_eq!(code(&sb.run(&["serve", "--config", s(&config)])), 1);
}
