use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let m = PyModule::new(py, "pinalite").unwrap();
        pinalite_py::pinalite_module(&m).unwrap();
        py.import("sys").unwrap().getattr("modules").unwrap().set_item("pinalite", &m).unwrap();
        let globals = PyDict::new(py);
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn binomial_and_verdicts() {
    run(r#"
import pinalite as p
assert abs(p.exact_binomial_tail(4, 4, 0.5) - 1 / 16) < 1e-15
assert p.exact_binomial_tail(0, 7, 0.5) == 1.0
v = p.uniqueness_verdict(4, 4)
assert v["public"] is False
v = p.uniqueness_verdict(5, 5)
assert v["public"] is True
try:
    p.exact_binomial_tail(5, 4, 0.5)
    raise AssertionError("f > g accepted")
except ValueError:
    pass
"#);
}

#[test]
fn hashing_and_queries() {
    run(r#"
import hashlib
import pinalite as p
h = p.client_hash_pair("com.example.app", "Main", "Hello")
assert h == hashlib.sha512(b"com.example.app\x1fMain\x1fHello").hexdigest(), h
try:
    p.client_hash_pair("com.example.app", "Ma\x1fin", "ab")
    raise AssertionError("delimiter accepted")
except ValueError:
    pass
q = p.Query("(text \"Pay\")")
assert p.Query(str(q)) == q
assert not q.contains_hidden()
"#);
}

#[test]
fn share_and_replay_round_trip() {
    run(r#"
import pinalite as p
pop = p.Population("banking-payment", 6, seed=3)
agg = p.Aggregator()
for u in range(5):
    for screen in pop.screens(u).values():
        agg.ingest(pop.user_id(u), screen)
assert agg.health()["entries"] > 0

script = p.record_from_trace(pop.trace_json(0))
assert script.version == "pinalite-script/1", script.version
assert script.validate() == [], script.validate()
report = p.Report.classify(script, agg, pop.user_id(0))
public, personal = report.counts()
assert personal > 0 and public > 0, (public, personal)
shared = report.obfuscate(script)
text = shared.to_json()
for s in pop.personal_strings(0):
    assert s not in text, s
assert shared.contains_hidden(), text
assert shared.version != script.version
assert p.Script.from_json(text).to_json() == text, "round trip"

result = p.execute(shared, pop.app(5))
assert result["success"], result["trace"]
rebuilt = result["rebuilt"]
assert not rebuilt.contains_hidden(), rebuilt.to_json()
consumer = set(pop.personal_strings(5))
assert any(s in rebuilt.to_json() for s in consumer), (consumer, rebuilt.to_json())
"#);
}

#[test]
fn review_toggles_feed_obfuscation() {
    run(r#"
import pinalite as p
pop = p.Population("coffee-ordering", 6, seed=1)
agg = p.Aggregator()
for u in range(6):
    for screen in pop.screens(u).values():
        agg.ingest(pop.user_id(u), screen)
script = p.record_from_trace(pop.trace_json(0))
report = p.Report.classify(script, agg, pop.user_id(0))
entries = report.entries()
public = [e for e in entries if e["final_public"]]
before = report.counts()
e = report.toggle(public[0]["entry_id"], False)
assert e["final_public"] is False
assert report.counts() == (before[0] - 1, before[1] + 1)
assert report.overrides() == {public[0]["entry_id"]: False}
try:
    report.toggle(10**6, True)
    raise AssertionError("unknown entry accepted")
except ValueError:
    pass
steps = report.preview(script)
assert len(steps) == script.block_count()
"#);
}

#[test]
fn harness_entry_points() {
    run(r#"
import pinalite as p
names = p.bundled_specs()
assert "banking-payment" in names
r = p.run_eval("banking-payment", 5)
assert r["recall"] == 1.0 and r["n"] >= 40
s = p.e2e_scenario("ride-hailing", 7)
assert s["passed"], [c for c in s["checks"] if not c["passed"]]
q = p.synthesize_alternative(p.Population("banking-payment", 1).screens(0)["home"], "nav_pay", [])
assert not q.contains_hidden()
"#);
}
