//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use ::pinalite::executor::{self, ExecOptions};
use ::pinalite::harness::{self, bundled_spec, SyntheticAppSpec};
use ::pinalite::hashing::{self, Salt, UserId};
use ::pinalite::obfuscator::{self, ObfuscationReport};
use ::pinalite::query::{self, parse_query};
use ::pinalite::script::{self, deserialize_script, load_trace, serialize_script};
use ::pinalite::server::{self as srv, AggregationService, ServerConfig, UniquenessVerdict};
use ::pinalite::ui_model::{self, extract_entries, load_screen, AppContext};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn user(id: &str) -> PyResult<UserId> {
    UserId::parse(id).map_err(value_err)
}

/// Selector over a screen's elements.
#[pyclass(module = "pinalite", name = "Query", from_py_object)]
#[derive(Clone)]
pub struct PyQuery(query::Query);

#[pymethods]
impl PyQuery {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        parse_query(text).map(Self).map_err(value_err)
    }

    /// Ids of matching elements in document order.
    fn evaluate(&self, screen: &PyScreen) -> Vec<String> {
        query::evaluate(&self.0, &screen.0.graph())
    }

    fn contains_hidden(&self) -> bool {
        self.0.contains_hidden()
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Query({:?})", self.0.to_string())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

#[pyclass(module = "pinalite", name = "Screen", from_py_object)]
#[derive(Clone)]
pub struct PyScreen(ui_model::Screen);

#[pymethods]
impl PyScreen {
    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        load_screen(document).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("screens serialize")
    }

    #[getter]
    fn context(&self) -> (String, String) {
        (self.0.context.package_name().to_owned(), self.0.context.activity_name().to_owned())
    }

    /// Distinct visible strings on the screen.
    fn entries(&self) -> Vec<String> {
        extract_entries(&self.0.graph()).into_iter().map(|e| e.content).collect()
    }
}

#[pyclass(module = "pinalite", name = "Script", from_py_object)]
#[derive(Clone)]
pub struct PyScript(script::Script);

#[pymethods]
impl PyScript {
    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        deserialize_script(document).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serialize_script(&self.0)
    }

    #[getter]
    fn version(&self) -> &'static str {
        self.0.version.as_str()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    fn block_count(&self) -> usize {
        self.0.block_count()
    }

    /// Parameter name to its values; hidden values come back as `None`.
    fn parameters(&self) -> BTreeMap<String, Vec<Option<String>>> {
        self.0
            .parameters
            .iter()
            .map(|p| {
                let vals = p.possible_values.iter().map(|v| v.as_plain().map(str::to_owned)).collect();
                (p.name.clone(), vals)
            })
            .collect()
    }

    fn contains_hidden(&self) -> bool {
        self.0.contains_hidden()
    }

    fn validate(&self) -> Vec<String> {
        script::validate(&self.0).iter().map(ToString::to_string).collect()
    }
}

/// In-process aggregation server.
#[pyclass(module = "pinalite", name = "Aggregator")]
pub struct PyAggregator(srv::Aggregator);

#[pymethods]
impl PyAggregator {
    #[new]
    #[pyo3(signature = (t = 0.5, alpha = 0.05, state_path = None))]
    fn new(t: f64, alpha: f64, state_path: Option<PathBuf>) -> PyResult<Self> {
        let mut config = ServerConfig::new(state_path.unwrap_or_else(|| PathBuf::from("pinalite-state.jsonl")));
        config.t = t;
        config.alpha = alpha;
        srv::Aggregator::new(config, Salt::generate()).map(Self).map_err(value_err)
    }

    /// Hashes and ingests one screen on behalf of `user_id`.
    fn ingest<'py>(&self, py: Python<'py>, user_id: &str, screen: &PyScreen) -> PyResult<Bound<'py, PyAny>> {
        let ack = ::pinalite::client::ingest_snapshot(&self.0, &user(user_id)?, &screen.0.graph()).map_err(runtime_err)?;
        to_py(py, &ack)
    }

    fn health<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.health())
    }

    fn persist(&self) -> PyResult<()> {
        self.0.persist().map_err(runtime_err)
    }

    fn restore(&self) -> PyResult<()> {
        self.0.restore().map_err(runtime_err)
    }
}

/// Classification of every string in a script, with author overrides.
#[pyclass(module = "pinalite", name = "Report")]
pub struct PyReport(ObfuscationReport);

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn classify(script: &PyScript, aggregator: &PyAggregator, user_id: &str) -> PyResult<Self> {
        obfuscator::classify(&script.0, &aggregator.0 as &dyn AggregationService, &user(user_id)?)
            .map(Self)
            .map_err(runtime_err)
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.entries)
    }

    fn counts(&self) -> (usize, usize) {
        (self.0.counts.public, self.0.counts.personal)
    }

    /// Sets the final label of one entry.
    fn toggle<'py>(&mut self, py: Python<'py>, entry_id: usize, public: bool) -> PyResult<Bound<'py, PyAny>> {
        let e = self.0.toggle(entry_id, public).map_err(value_err)?.clone();
        to_py(py, &e)
    }

    fn overrides(&self) -> BTreeMap<usize, bool> {
        self.0.overrides()
    }

    /// The shared script, or an error when any personal string would remain.
    fn obfuscate(&self, script: &PyScript) -> PyResult<PyScript> {
        obfuscator::obfuscate(&script.0, &self.0)
            .map(|out| PyScript(out.script))
            .map_err(runtime_err)
    }

    fn preview<'py>(&self, py: Python<'py>, script: &PyScript) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &obfuscator::preview(&script.0, &self.0))
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("reports serialize")
    }
}

#[pyclass(module = "pinalite", name = "SimulatedApp")]
pub struct PySimulatedApp(executor::SimulatedApp);

#[pymethods]
impl PySimulatedApp {
    #[staticmethod]
    fn from_json(document: &str) -> PyResult<Self> {
        executor::SimulatedApp::from_json(document).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(self.0.document()).expect("apps serialize")
    }
}

/// Synthetic users of one app.
#[pyclass(module = "pinalite", name = "Population")]
pub struct PyPopulation(harness::Population);

#[pymethods]
impl PyPopulation {
    #[new]
    #[pyo3(signature = (spec, users, seed = 0))]
    fn new(spec: &str, users: usize, seed: u64) -> PyResult<Self> {
        harness::gen_population(&spec_arg(spec)?, users, seed).map(Self).map_err(runtime_err)
    }

    fn __len__(&self) -> usize {
        self.0.users.len()
    }

    fn user_id(&self, u: usize) -> PyResult<String> {
        self.profile(u).map(|p| p.user_id.as_str().to_owned())
    }

    /// Screens the user can reach, keyed by template name.
    fn screens(&self, u: usize) -> PyResult<BTreeMap<String, PyScreen>> {
        self.profile(u)?;
        Ok(self.0.visible_screens(u).map(|(k, s)| (k.clone(), PyScreen(s.clone()))).collect())
    }

    fn personal_strings(&self, u: usize) -> PyResult<Vec<String>> {
        self.profile(u).map(|p| p.personal_strings().into_iter().collect())
    }

    /// The user's demonstration of the app's task, as a trace document.
    fn trace_json(&self, u: usize) -> PyResult<String> {
        self.profile(u)?;
        serde_json::to_string(&self.0.trace(u)).map_err(runtime_err)
    }

    fn app(&self, u: usize) -> PyResult<PySimulatedApp> {
        self.profile(u)?;
        self.0.app(u).map(PySimulatedApp).map_err(runtime_err)
    }
}

impl PyPopulation {
    fn profile(&self, u: usize) -> PyResult<&harness::UserProfile> {
        self.0
            .users
            .get(u)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("no user {u}")))
    }
}

#[pyfunction]
fn exact_binomial_tail(f: u64, g: u64, t: f64) -> PyResult<f64> {
    srv::exact_binomial_tail(f, g, t).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (f, g, t = 0.5, alpha = 0.05))]
fn uniqueness_verdict<'py>(py: Python<'py>, f: u64, g: u64, t: f64, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    if !(t > 0.0 && t < 1.0 && alpha > 0.0 && alpha < 1.0) {
        return Err(value_err("t and alpha must lie in (0, 1)"));
    }
    to_py(py, &UniquenessVerdict::compute(f, g, t, alpha))
}

/// Lowercase hex SHA-512 of one `(package, activity, content)` entry.
#[pyfunction]
fn client_hash_pair(package: &str, activity: &str, content: &str) -> PyResult<String> {
    let ctx = AppContext::new(package, activity).map_err(value_err)?;
    hashing::client_hash_pair(&ctx, content)
        .map(|h| h.as_str().to_owned())
        .map_err(value_err)
}

#[pyfunction]
fn synthesize_alternative(screen: &PyScreen, target: &str, personal: Vec<String>) -> PyResult<PyQuery> {
    let personal: HashSet<String> = personal.into_iter().collect();
    query::synthesize_alternative(&screen.0.graph(), target, &personal)
        .map(PyQuery)
        .map_err(value_err)
}

#[pyfunction]
fn record_from_trace(trace_json: &str) -> PyResult<PyScript> {
    let trace = load_trace(trace_json).map_err(value_err)?;
    script::record_from_trace(&trace).map(PyScript).map_err(value_err)
}

/// Runs a script; returns `{"success", "trace", "rebuilt"}`.
#[pyfunction]
#[pyo3(signature = (script, app, params = None))]
fn execute<'py>(
    py: Python<'py>,
    script: &PyScript,
    app: &PySimulatedApp,
    params: Option<BTreeMap<String, String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = ExecOptions {
        params: params.unwrap_or_default(),
        ..ExecOptions::default()
    };
    let exec = executor::execute(&script.0, &app.0, &opts).map_err(value_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("success", exec.success)?;
    out.set_item("trace", to_py(py, &exec.trace.events)?)?;
    out.set_item("rebuilt", PyScript(exec.rebuilt))?;
    Ok(out.into_any())
}

fn spec_arg(spec: &str) -> PyResult<SyntheticAppSpec> {
    match bundled_spec(spec) {
        Some(s) => Ok(s),
        None => SyntheticAppSpec::from_json(spec).map_err(value_err),
    }
}

/// Names of the bundled synthetic apps.
#[pyfunction]
fn bundled_specs() -> Vec<String> {
    harness::bundled_specs().into_iter().map(|s| s.name).collect()
}

/// `spec` is a bundled app name or a spec document.
#[pyfunction]
#[pyo3(signature = (spec, users = 5, t = 0.5))]
fn run_eval<'py>(py: Python<'py>, spec: &str, users: usize, t: f64) -> PyResult<Bound<'py, PyAny>> {
    let r = harness::run_eval(&spec_arg(spec)?, users, t).map_err(runtime_err)?;
    to_py(py, &r)
}

/// Runs an end-to-end share and rebuild; returns `{"passed", "checks"}`.
#[pyfunction]
#[pyo3(signature = (spec, seed = 0))]
fn e2e_scenario<'py>(py: Python<'py>, spec: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = harness::e2e_scenario(&spec_arg(spec)?, seed).map_err(runtime_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("scenario", &r.scenario)?;
    out.set_item("passed", r.passed)?;
    out.set_item("checks", to_py(py, &r.checks)?)?;
    out.set_item("shared", PyScript(r.shared))?;
    Ok(out.into_any())
}

#[pymodule]
#[pyo3(name = "pinalite")]
pub fn pinalite_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuery>()?;
    m.add_class::<PyScreen>()?;
    m.add_class::<PyScript>()?;
    m.add_class::<PyAggregator>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PySimulatedApp>()?;
    m.add_class::<PyPopulation>()?;
    m.add_function(wrap_pyfunction!(exact_binomial_tail, m)?)?;
    m.add_function(wrap_pyfunction!(uniqueness_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(client_hash_pair, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_alternative, m)?)?;
    m.add_function(wrap_pyfunction!(record_from_trace, m)?)?;
    m.add_function(wrap_pyfunction!(execute, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_specs, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add_function(wrap_pyfunction!(e2e_scenario, m)?)?;
    Ok(())
}
