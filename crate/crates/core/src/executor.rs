//! Replays scripts against a simulated app. Hidden data descriptions are
//! rebuilt from the consumer's own screens through the alternative query.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::SaltedHash;
use crate::query::{eval_positions, string_refs, HiddenProperty, Property, Query};
use crate::script::{Block, ConditionError, OpKind, Operation, Script, ScriptVersion};
use crate::slot::Slot;
use crate::ui_model::{AppContext, Predicate, Screen, UiElement, UiError, UiSnapshotGraph};

pub const DEFAULT_SAME_SCREEN_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("invalid app: {0}")]
    App(String),
    #[error("block {block}: {message}")]
    Script { block: usize, message: String },
    #[error("block {block}: {source}")]
    Condition { block: usize, source: ConditionError },
    #[error("parameter `{name}`: {message}")]
    Parameter { name: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppScreen {
    pub activity: String,
    pub root: UiElement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub from: String,
    pub element: String,
    pub action: OpKind,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppDocument {
    pub package: String,
    pub screens: BTreeMap<String, AppScreen>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    pub initial: String,
}

/// A validated screen state machine.
#[derive(Clone, Debug)]
pub struct SimulatedApp {
    doc: AppDocument,
    screens: BTreeMap<String, Screen>,
    graphs: BTreeMap<String, UiSnapshotGraph>,
    transitions: HashMap<(String, String, OpKind), String>,
}

impl SimulatedApp {
    pub fn new(doc: AppDocument) -> Result<Self, ExecError> {
        let err = |m: String| ExecError::App(m);
        if !doc.screens.contains_key(&doc.initial) {
            return Err(err(format!("initial screen `{}` does not exist", doc.initial)));
        }
        let mut screens = BTreeMap::new();
        for (name, s) in &doc.screens {
            let ctx = AppContext::new(doc.package.clone(), s.activity.clone())
                .map_err(|e: UiError| err(format!("screen `{name}`: {e}")))?;
            let screen = Screen::new(ctx, s.root.clone()).map_err(|e| err(format!("screen `{name}`: {e}")))?;
            screens.insert(name.clone(), screen);
        }
        let mut transitions = HashMap::new();
        for t in &doc.transitions {
            let from = screens
                .get(&t.from)
                .ok_or_else(|| err(format!("transition from unknown screen `{}`", t.from)))?;
            if from.root.find(&t.element).is_none() {
                return Err(err(format!("transition element `{}` not on screen `{}`", t.element, t.from)));
            }
            if !screens.contains_key(&t.to) {
                return Err(err(format!("transition to unknown screen `{}`", t.to)));
            }
            transitions.insert((t.from.clone(), t.element.clone(), t.action), t.to.clone());
        }
        let graphs = screens.iter().map(|(k, s)| (k.clone(), s.graph())).collect();
        Ok(Self {
            doc,
            screens,
            graphs,
            transitions,
        })
    }

    pub fn from_json(document: &str) -> Result<Self, ExecError> {
        let de = &mut serde_json::Deserializer::from_str(document);
        let doc: AppDocument = serde_path_to_error::deserialize(de)
            .map_err(|e| ExecError::App(format!("{}: {}", e.path(), e.inner())))?;
        Self::new(doc)
    }

    pub fn document(&self) -> &AppDocument {
        &self.doc
    }

    pub fn initial(&self) -> &str {
        &self.doc.initial
    }

    pub fn screen(&self, name: &str) -> Option<&Screen> {
        self.screens.get(name)
    }

    pub fn graph(&self, name: &str) -> Option<&UiSnapshotGraph> {
        self.graphs.get(name)
    }

    /// Next screen after `action` on `element`; unchanged when no transition is defined.
    pub fn next(&self, screen: &str, element: &str, action: OpKind) -> String {
        self.transitions
            .get(&(screen.to_owned(), element.to_owned(), action))
            .cloned()
            .unwrap_or_else(|| screen.to_owned())
    }
}

// ---------------------------------------------------------------------------
// Screen comparison

fn structural_features(g: &UiSnapshotGraph) -> HashMap<String, usize> {
    let mut out: HashMap<String, usize> = HashMap::new();
    let mut add = |k: String| *out.entry(k).or_default() += 1;
    for pos in 0..g.len() {
        let class = g.class_name(pos).unwrap_or_default();
        add(format!("class:{class}"));
        if let Some(v) = g.literal(pos, Predicate::HasViewId) {
            add(format!("view:{class}#{v}"));
        }
        for p in Predicate::ALL.into_iter().filter(|p| p.is_flag()) {
            add(format!("flag:{class}:{}={}", p.name(), g.flag(pos, p)));
        }
        if let Some(parent) = g.parent(pos) {
            add(format!("edge:{}>{class}", g.class_name(parent).unwrap_or_default()));
        }
    }
    out
}

/// Multiset Jaccard similarity over structure only (classes, view ids,
/// flags, parent/child class edges). Texts are ignored because they may be
/// hashed or differ per user.
pub fn structural_similarity(a: &UiSnapshotGraph, b: &UiSnapshotGraph) -> f64 {
    let (fa, fb) = (structural_features(a), structural_features(b));
    let mut inter = 0usize;
    let mut union = 0usize;
    for (k, &na) in &fa {
        let nb = fb.get(k).copied().unwrap_or(0);
        inter += na.min(nb);
        union += na.max(nb);
    }
    for (k, &nb) in &fb {
        if !fa.contains_key(k) {
            union += nb;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenMatch {
    pub same_screen: bool,
    pub similarity: f64,
}

pub fn screen_match(current: &UiSnapshotGraph, stored: &UiSnapshotGraph, threshold: f64) -> ScreenMatch {
    let similarity = structural_similarity(current, stored);
    ScreenMatch {
        same_screen: current.context() == stored.context() && similarity >= threshold,
        similarity,
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// Replaces the bound operation's text slot with `value`.
pub fn substitute_parameter(script: &Script, name: &str, value: &str) -> Result<Script, ExecError> {
    let perr = |message: String| ExecError::Parameter {
        name: name.to_owned(),
        message,
    };
    let param = script.parameter(name).ok_or_else(|| perr("no such parameter".into()))?;
    let values: Vec<&str> = param.possible_values.iter().filter_map(Slot::as_plain).collect();
    if !values.contains(&value) {
        return Err(perr(format!("`{value}` is not one of the possible values")));
    }
    let mut out = script.clone();
    let op = out
        .operation_mut(param.bound_op)
        .ok_or_else(|| perr(format!("bound_op {} is not an operation", param.bound_op)))?;
    let q = op.target_query.as_mut().ok_or_else(|| perr("bound operation has no query".into()))?;
    let slot = string_refs(q)
        .into_iter()
        .find(|r| r.property == Property::Text && values.contains(&r.value.as_str()))
        .ok_or_else(|| perr("bound query has no text slot holding a possible value".into()))?;
    *q.at_mut(&slot.path).expect("string ref path resolves") = Query::text(value);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureKind {
    NoMatch,
    Ambiguous,
    WrongScreen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rebuild {
    pub old_hidden_hash: SaltedHash,
    pub new_plaintext: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub op_index: usize,
    pub kind: OpKind,
    pub screen: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub used_alt_query: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rebuilt: Vec<Rebuild>,
    /// Text read out, extracted or typed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub events: Vec<TraceEvent>,
}

impl ExecutionTrace {
    /// Line-delimited JSON, one event per line.
    pub fn to_json_lines(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }

    pub fn matched_elements(&self) -> Vec<&str> {
        self.events.iter().filter_map(|e| e.matched.as_deref()).collect()
    }

    pub fn failure(&self) -> Option<&Failure> {
        self.events.iter().find_map(|e| e.failure.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    pub trace: ExecutionTrace,
    /// Consumer-local copy with hidden slots filled in.
    pub rebuilt: Script,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecOptions {
    pub same_screen_threshold: f64,
    /// Requested parameter values by name.
    pub params: BTreeMap<String, String>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            same_screen_threshold: DEFAULT_SAME_SCREEN_THRESHOLD,
            params: BTreeMap::new(),
        }
    }
}

/// A hidden ref is fillable when it constrains the target itself: the query
/// is the hidden property, or a conjunction that has it as a direct part.
fn top_level(path: &[usize], q: &Query) -> bool {
    path.is_empty() || (path.len() == 1 && matches!(q, Query::Conj(_)))
}

struct Run<'a> {
    app: &'a SimulatedApp,
    opts: &'a ExecOptions,
    screen: String,
    vars: HashMap<String, String>,
    rebuilt: Script,
    trace: ExecutionTrace,
}

enum Step {
    Continue,
    Halt,
}

impl Run<'_> {
    fn graph(&self) -> &UiSnapshotGraph {
        self.app.graph(&self.screen).expect("current screen exists")
    }

    fn event(&self, op_index: usize, kind: OpKind) -> TraceEvent {
        TraceEvent {
            op_index,
            kind,
            screen: self.screen.clone(),
            matched: None,
            failure: None,
            used_alt_query: false,
            rebuilt: Vec::new(),
            value: None,
        }
    }

    fn fail(&mut self, mut ev: TraceEvent, kind: FailureKind, similarity: Option<f64>) -> Step {
        ev.failure = Some(Failure { kind, similarity });
        self.trace.events.push(ev);
        Step::Halt
    }

    fn blocks(&mut self, blocks: &[Block], next: &mut usize) -> Result<Step, ExecError> {
        for b in blocks {
            let idx = *next;
            *next += 1;
            match b {
                Block::Op(op) => {
                    if let Step::Halt = self.operation(idx, op)? {
                        return Ok(Step::Halt);
                    }
                }
                Block::If(c) => {
                    let vars = &self.vars;
                    let holds = c
                        .condition
                        .evaluate(&|name: &str| vars.get(name).cloned())
                        .map_err(|source| ExecError::Condition { block: idx, source })?;
                    let mut then_next = *next;
                    let then_len = count_blocks(&c.then_block);
                    if holds {
                        if let Step::Halt = self.blocks(&c.then_block, &mut then_next)? {
                            return Ok(Step::Halt);
                        }
                    }
                    *next += then_len;
                    if let Some(e) = &c.else_block {
                        let mut else_next = *next;
                        if !holds {
                            if let Step::Halt = self.blocks(e, &mut else_next)? {
                                return Ok(Step::Halt);
                            }
                        }
                        *next += count_blocks(e);
                    }
                }
            }
        }
        Ok(Step::Continue)
    }

    fn operation(&mut self, idx: usize, op: &Operation) -> Result<Step, ExecError> {
        let mut ev = self.event(idx, op.kind);
        match op.kind {
            OpKind::Pause => {
                self.trace.events.push(ev);
                return Ok(Step::Continue);
            }
            OpKind::Launch => {
                let app_ok = op
                    .app
                    .as_ref()
                    .is_none_or(|a| a.package_name() == self.app.document().package);
                if !app_ok {
                    return Err(ExecError::Script {
                        block: idx,
                        message: "LAUNCH targets a different app".into(),
                    });
                }
                self.screen = self.app.initial().to_owned();
                ev.screen = self.screen.clone();
                self.trace.events.push(ev);
                return Ok(Step::Continue);
            }
            _ => {}
        }
        let serr = |message: &str| ExecError::Script {
            block: idx,
            message: message.to_owned(),
        };
        let query = op.target_query.as_ref().ok_or_else(|| serr("operation has no target query"))?;

        if let Some(stored) = &op.snapshot {
            let m = screen_match(self.graph(), &stored.graph(), self.opts.same_screen_threshold);
            if !m.same_screen {
                return Ok(self.fail(ev, FailureKind::WrongScreen, Some(m.similarity)));
            }
        }

        let g = self.graph().clone();
        let hidden = query.contains_hidden();
        let mut new_query = query.clone();
        let mut target = None;
        if !hidden {
            match eval_positions(query, &g).as_slice() {
                [one] => target = Some(*one),
                [] => {}
                _ => return Ok(self.fail(ev, FailureKind::Ambiguous, None)),
            }
        }
        let mut rebuilt_here = false;
        if target.is_none() {
            // Hidden slots, or a stale plaintext description: go through alt_query.
            let Some(alt) = &op.alt_query else {
                return Ok(self.fail(ev, FailureKind::NoMatch, None));
            };
            match eval_positions(alt, &g).as_slice() {
                [one] => target = Some(*one),
                [] => return Ok(self.fail(ev, FailureKind::NoMatch, None)),
                _ => return Ok(self.fail(ev, FailureKind::Ambiguous, None)),
            }
            let t = target.expect("set above");
            ev.used_alt_query = true;
            rebuilt_here = true;
            let mut fillable = true;
            for (path, prop, hash) in query.hidden_refs() {
                let pred = match prop {
                    HiddenProperty::Text => Predicate::HasText,
                    HiddenProperty::ContentDesc => Predicate::HasContentDescription,
                };
                match g.literal(t, pred) {
                    Some(text) if top_level(&path, query) => {
                        *new_query.at_mut(&path).expect("hidden ref path resolves") =
                            Query::Property(prop.property(), text.to_owned());
                        ev.rebuilt.push(Rebuild {
                            old_hidden_hash: hash,
                            new_plaintext: text.to_owned(),
                        });
                    }
                    _ => fillable = false,
                }
            }
            if !fillable || new_query.contains_hidden() || eval_positions(&new_query, &g) != [t] {
                new_query = alt.clone();
            }
        }
        let mut t = target.expect("resolved above");

        // Parameters bound to this operation.
        let bound: Vec<String> = self
            .rebuilt
            .parameters_for(idx)
            .map(|p| p.name.clone())
            .collect();
        for name in bound {
            let param = self.rebuilt.parameter(&name).expect("listed above").clone();
            let needs_regen = rebuilt_here || param.possible_values.iter().any(Slot::is_hidden);
            let values: Vec<String> = if needs_regen {
                g.same_class_sibling_texts(t)
            } else {
                param.possible_values.iter().filter_map(|v| v.as_plain().map(str::to_owned)).collect()
            };
            if let Some(p) = self.rebuilt.parameters.iter_mut().find(|p| p.name == name) {
                p.possible_values = values.iter().cloned().map(Slot::Plain).collect();
            }
            let chosen = match self.opts.params.get(&name) {
                Some(v) => {
                    if !values.contains(v) {
                        return Err(ExecError::Parameter {
                            name,
                            message: format!("`{v}` is not one of the possible values {values:?}"),
                        });
                    }
                    let refs = string_refs(&new_query);
                    let slot = refs
                        .iter()
                        .find(|r| r.property == Property::Text && values.contains(&r.value));
                    match slot {
                        Some(r) => {
                            *new_query.at_mut(&r.path).expect("string ref path resolves") = Query::text(v.clone());
                            match eval_positions(&new_query, &g).as_slice() {
                                [one] => t = *one,
                                [] => return Ok(self.fail(ev, FailureKind::NoMatch, None)),
                                _ => return Ok(self.fail(ev, FailureKind::Ambiguous, None)),
                            }
                        }
                        None => {
                            return Err(ExecError::Parameter {
                                name,
                                message: "bound query has no text slot to substitute".into(),
                            })
                        }
                    }
                    v.clone()
                }
                None => g.literal(t, Predicate::HasText).unwrap_or_default().to_owned(),
            };
            self.vars.insert(name, chosen);
        }

        let stale_snapshot = op.snapshot.as_ref().is_some_and(|s| s.root.contains_hidden());
        if rebuilt_here || stale_snapshot || new_query != *query {
            let consumer_screen = self.app.screen(&self.screen).expect("current screen exists").clone();
            if let Some(rop) = self.rebuilt.operation_mut(idx) {
                rop.target_query = Some(new_query);
                if rebuilt_here || stale_snapshot {
                    rop.snapshot = Some(consumer_screen);
                }
            }
        }

        let element = g.id_at(t).to_owned();
        match op.kind {
            OpKind::SetText => match &op.text_arg {
                Some(Slot::Plain(v)) => ev.value = Some(v.clone()),
                Some(Slot::Hidden(_)) => return Err(serr("SET_TEXT argument is hidden and cannot be typed")),
                None => return Err(serr("SET_TEXT has no text argument")),
            },
            OpKind::ReadOut => ev.value = Some(g.literal(t, Predicate::HasText).unwrap_or_default().to_owned()),
            OpKind::ExtractValue => {
                let v = g.literal(t, Predicate::HasText).unwrap_or_default().to_owned();
                let name = op.variable_name.clone().ok_or_else(|| serr("EXTRACT_VALUE has no variable name"))?;
                self.vars.insert(name, v.clone());
                ev.value = Some(v);
            }
            _ => {}
        }
        ev.matched = Some(element.clone());
        self.trace.events.push(ev);
        self.screen = self.app.next(&self.screen, &element, op.kind);
        Ok(Step::Continue)
    }
}

fn count_blocks(blocks: &[Block]) -> usize {
    blocks
        .iter()
        .map(|b| match b {
            Block::Op(_) => 1,
            Block::If(c) => 1 + count_blocks(&c.then_block) + c.else_block.as_deref().map_or(0, count_blocks),
        })
        .sum()
}

/// Runs `script` from the app's initial screen. Matching failures end the run
/// with a failure event; malformed scripts and unbound variables are errors.
pub fn execute(script: &Script, app: &SimulatedApp, opts: &ExecOptions) -> Result<Execution, ExecError> {
    for name in opts.params.keys() {
        if script.parameter(name).is_none() {
            return Err(ExecError::Parameter {
                name: name.clone(),
                message: "no such parameter".into(),
            });
        }
    }
    let mut run = Run {
        app,
        opts,
        screen: app.initial().to_owned(),
        vars: HashMap::new(),
        rebuilt: script.clone(),
        trace: ExecutionTrace::default(),
    };
    let step = run.blocks(&script.blocks, &mut 0)?;
    let mut rebuilt = run.rebuilt;
    if !rebuilt.contains_hidden() {
        rebuilt.version = ScriptVersion::Plain;
    }
    Ok(Execution {
        trace: run.trace,
        rebuilt,
        success: matches!(step, Step::Continue),
    })
}
