//! Programming-by-demonstration scripts.
//!
//! A script is an ordered list of blocks (operations and conditionals) plus
//! parameters. Blocks are addressed by a single pre-order index that descends
//! into conditional branches; parameters and report locations use it.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::query::{evaluate, string_refs, Flag, Property, Query};
use crate::slot::Slot;
use crate::ui_model::{AppContext, Predicate, Screen, UiSnapshotGraph};

pub const SCRIPT_VERSION: &str = "pinalite-script/1";
pub const SHARED_VERSION: &str = "pinalite-shared/1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScriptError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported script version `{0}`")]
    UnsupportedVersion(String),
    #[error("recording failed at event {event}: {message}")]
    Record { event: usize, message: String },
    #[error("parameter error: {0}")]
    Parameter(String),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ScriptError {
    ScriptError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ScriptVersion {
    #[default]
    Plain,
    Shared,
}

impl ScriptVersion {
    pub fn as_str(self) -> &'static str {
        match self {
            ScriptVersion::Plain => SCRIPT_VERSION,
            ScriptVersion::Shared => SHARED_VERSION,
        }
    }

    pub fn parse(s: &str) -> Result<Self, ScriptError> {
        match s {
            SCRIPT_VERSION => Ok(ScriptVersion::Plain),
            SHARED_VERSION => Ok(ScriptVersion::Shared),
            other => Err(ScriptError::UnsupportedVersion(other.to_owned())),
        }
    }
}

impl Serialize for ScriptVersion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Click,
    LongClick,
    SetText,
    ReadOut,
    ExtractValue,
    Pause,
    Launch,
}

impl OpKind {
    /// Kinds that act on a screen element and need a target query and snapshot.
    pub fn targets_element(self) -> bool {
        matches!(
            self,
            OpKind::Click | OpKind::LongClick | OpKind::SetText | OpKind::ReadOut | OpKind::ExtractValue
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Click => "CLICK",
            OpKind::LongClick => "LONG_CLICK",
            OpKind::SetText => "SET_TEXT",
            OpKind::ReadOut => "READ_OUT",
            OpKind::ExtractValue => "EXTRACT_VALUE",
            OpKind::Pause => "PAUSE",
            OpKind::Launch => "LAUNCH",
        };
        f.write_str(s)
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Operation {
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_query: Option<Query>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_query: Option<Query>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_arg: Option<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub wait_for_user: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<AppContext>,
    /// Element tree captured at demonstration time; triples are rebuilt on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Screen>,
}

impl Operation {
    pub fn new(kind: OpKind) -> Self {
        Self {
            kind,
            target_query: None,
            alt_query: None,
            text_arg: None,
            variable_name: None,
            duration_s: None,
            wait_for_user: false,
            app: None,
            snapshot: None,
        }
    }

    pub fn snapshot_graph(&self) -> Option<UiSnapshotGraph> {
        self.snapshot.as_ref().map(Screen::graph)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Gt => ">",
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
        }
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Comparator::Eq => ord == Equal,
            Comparator::Ne => ord != Equal,
            Comparator::Lt => ord == Less,
            Comparator::Gt => ord == Greater,
            Comparator::Le => ord != Greater,
            Comparator::Ge => ord != Less,
        }
    }
}

impl Serialize for Comparator {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Comparator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "=" => Comparator::Eq,
            "!=" | "≠" => Comparator::Ne,
            "<" => Comparator::Lt,
            ">" => Comparator::Gt,
            "<=" | "≤" => Comparator::Le,
            ">=" | "≥" => Comparator::Ge,
            other => return Err(serde::de::Error::custom(format!("unknown comparator `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Operand {
    Var(String),
    Lit(Slot),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Condition {
    Cmp {
        op: Comparator,
        left: Operand,
        right: Operand,
    },
    All(Vec<Condition>),
    Any(Vec<Condition>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConditionError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("condition literal is hidden and cannot be evaluated")]
    HiddenLiteral,
}

fn as_decimal(s: &str) -> Option<f64> {
    let t = s.trim();
    let body = t.strip_prefix('-').unwrap_or(t);
    let mut parts = body.splitn(2, '.');
    let int = parts.next()?;
    let frac = parts.next();
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if digits(int) && frac.is_none_or(digits) {
        t.parse().ok()
    } else {
        None
    }
}

impl Condition {
    /// Numeric comparison when both sides are decimal numbers, string
    /// comparison otherwise.
    pub fn evaluate(&self, lookup: &dyn Fn(&str) -> Option<String>) -> Result<bool, ConditionError> {
        match self {
            Condition::Cmp { op, left, right } => {
                let value = |o: &Operand| match o {
                    Operand::Var(v) => lookup(v).ok_or_else(|| ConditionError::Unbound(v.clone())),
                    Operand::Lit(Slot::Plain(s)) => Ok(s.clone()),
                    Operand::Lit(Slot::Hidden(_)) => Err(ConditionError::HiddenLiteral),
                };
                let (l, r) = (value(left)?, value(right)?);
                let ord = match (as_decimal(&l), as_decimal(&r)) {
                    (Some(a), Some(b)) => a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal),
                    _ => l.cmp(&r),
                };
                Ok(op.holds(ord))
            }
            Condition::All(cs) => {
                for c in cs {
                    if !c.evaluate(lookup)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Condition::Any(cs) => {
                for c in cs {
                    if c.evaluate(lookup)? {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
        }
    }

    pub fn variables(&self) -> Vec<&str> {
        match self {
            Condition::Cmp { left, right, .. } => [left, right]
                .into_iter()
                .filter_map(|o| match o {
                    Operand::Var(v) => Some(v.as_str()),
                    Operand::Lit(_) => None,
                })
                .collect(),
            Condition::All(cs) | Condition::Any(cs) => cs.iter().flat_map(Condition::variables).collect(),
        }
    }

    /// Literal slots with their paths (`left`/`right` under `all[i]`/`any[i]`).
    pub fn literals_mut(&mut self) -> Vec<(String, &mut Slot)> {
        fn go<'a>(c: &'a mut Condition, prefix: String, out: &mut Vec<(String, &'a mut Slot)>) {
            match c {
                Condition::Cmp { left, right, .. } => {
                    if let Operand::Lit(s) = left {
                        out.push((format!("{prefix}left"), s));
                    }
                    if let Operand::Lit(s) = right {
                        out.push((format!("{prefix}right"), s));
                    }
                }
                Condition::All(cs) => {
                    for (i, c) in cs.iter_mut().enumerate() {
                        go(c, format!("{prefix}all[{i}]."), out);
                    }
                }
                Condition::Any(cs) => {
                    for (i, c) in cs.iter_mut().enumerate() {
                        go(c, format!("{prefix}any[{i}]."), out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        go(self, String::new(), &mut out);
        out
    }

    pub fn literals(&self) -> Vec<(String, Slot)> {
        let mut c = self.clone();
        c.literals_mut().into_iter().map(|(p, s)| (p, s.clone())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Conditional {
    pub condition: Condition,
    pub then_block: Vec<Block>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub else_block: Option<Vec<Block>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type")]
pub enum Block {
    #[serde(rename = "op")]
    Op(Operation),
    #[serde(rename = "if")]
    If(Conditional),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameter {
    pub name: String,
    pub bound_op: usize,
    pub possible_values: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Script {
    pub version: ScriptVersion,
    pub name: String,
    pub blocks: Vec<Block>,
    pub parameters: Vec<Parameter>,
}

fn visit_blocks<'a>(blocks: &'a [Block], next: &mut usize, f: &mut impl FnMut(usize, &'a Block)) {
    for b in blocks {
        let idx = *next;
        *next += 1;
        f(idx, b);
        if let Block::If(c) = b {
            visit_blocks(&c.then_block, next, f);
            if let Some(e) = &c.else_block {
                visit_blocks(e, next, f);
            }
        }
    }
}

fn visit_blocks_mut(blocks: &mut [Block], next: &mut usize, f: &mut impl FnMut(usize, &mut Block)) {
    for b in blocks {
        let idx = *next;
        *next += 1;
        f(idx, b);
        if let Block::If(c) = b {
            visit_blocks_mut(&mut c.then_block, next, f);
            if let Some(e) = &mut c.else_block {
                visit_blocks_mut(e, next, f);
            }
        }
    }
}

impl Script {
    pub fn new(name: impl Into<String>, blocks: Vec<Block>) -> Self {
        Self {
            version: ScriptVersion::Plain,
            name: name.into(),
            blocks,
            parameters: Vec::new(),
        }
    }

    /// Every block with its pre-order index.
    pub fn indexed_blocks(&self) -> Vec<(usize, &Block)> {
        let mut out = Vec::new();
        visit_blocks(&self.blocks, &mut 0, &mut |i, b| out.push((i, b)));
        out
    }

    pub fn operations(&self) -> Vec<(usize, &Operation)> {
        self.indexed_blocks()
            .into_iter()
            .filter_map(|(i, b)| match b {
                Block::Op(op) => Some((i, op)),
                Block::If(_) => None,
            })
            .collect()
    }

    pub fn block_count(&self) -> usize {
        self.indexed_blocks().len()
    }

    pub fn operation(&self, index: usize) -> Option<&Operation> {
        self.operations().into_iter().find(|(i, _)| *i == index).map(|(_, op)| op)
    }

    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(usize, &mut Block)) {
        visit_blocks_mut(&mut self.blocks, &mut 0, &mut f);
    }

    pub fn operation_mut(&mut self, index: usize) -> Option<&mut Operation> {
        fn find<'a>(blocks: &'a mut [Block], next: &mut usize, index: usize) -> Option<&'a mut Operation> {
            for b in blocks {
                let idx = *next;
                *next += 1;
                match b {
                    Block::Op(op) if idx == index => return Some(op),
                    Block::Op(_) => {}
                    Block::If(c) => {
                        if idx == index {
                            return None;
                        }
                        if let Some(op) = find(&mut c.then_block, next, index) {
                            return Some(op);
                        }
                        if let Some(e) = &mut c.else_block {
                            if let Some(op) = find(e, next, index) {
                                return Some(op);
                            }
                        }
                    }
                }
                if *next > index {
                    return None;
                }
            }
            None
        }
        find(&mut self.blocks, &mut 0, index)
    }

    /// True when any slot anywhere (queries, arguments, snapshots,
    /// conditions, parameter values) is still a salted hash.
    pub fn contains_hidden(&self) -> bool {
        let blocks = self.indexed_blocks().into_iter().any(|(_, b)| match b {
            Block::Op(op) => {
                op.target_query.as_ref().is_some_and(Query::contains_hidden)
                    || op.alt_query.as_ref().is_some_and(Query::contains_hidden)
                    || op.text_arg.as_ref().is_some_and(Slot::is_hidden)
                    || op.snapshot.as_ref().is_some_and(|s| s.root.contains_hidden())
            }
            Block::If(c) => c.condition.literals().iter().any(|(_, s)| s.is_hidden()),
        });
        blocks || self.parameters.iter().any(|p| p.possible_values.iter().any(Slot::is_hidden))
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn parameters_for(&self, op_index: usize) -> impl Iterator<Item = &Parameter> {
        self.parameters.iter().filter(move |p| p.bound_op == op_index)
    }
}

// ---------------------------------------------------------------------------
// Deserialization with precise error paths.

fn take_field(obj: &mut serde_json::Map<String, Value>, key: &str, path: &str) -> Result<Value, ScriptError> {
    obj.remove(key)
        .ok_or_else(|| schema(path, format!("missing field `{key}`")))
}

fn typed<T: serde::de::DeserializeOwned>(v: Value, path: &str) -> Result<T, ScriptError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let inner = e.path().to_string();
        let full = if inner == "." || inner.is_empty() {
            path.to_owned()
        } else if inner.starts_with('[') {
            format!("{path}{inner}")
        } else {
            format!("{path}.{inner}")
        };
        schema(full, e.inner().to_string())
    })
}

fn parse_blocks(v: Value, path: &str) -> Result<Vec<Block>, ScriptError> {
    let Value::Array(items) = v else {
        return Err(schema(path, "expected an array of blocks"));
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| parse_block(item, &format!("{path}[{i}]")))
        .collect()
}

fn parse_block(v: Value, path: &str) -> Result<Block, ScriptError> {
    let Value::Object(mut obj) = v else {
        return Err(schema(path, "expected a block object"));
    };
    let ty = take_field(&mut obj, "type", path)?;
    match ty.as_str() {
        Some("op") => Ok(Block::Op(typed(Value::Object(obj), path)?)),
        Some("if") => {
            let condition = typed(take_field(&mut obj, "condition", path)?, &format!("{path}.condition"))?;
            let then_block = parse_blocks(take_field(&mut obj, "then_block", path)?, &format!("{path}.then_block"))?;
            let else_block = match obj.remove("else_block") {
                None | Some(Value::Null) => None,
                Some(v) => Some(parse_blocks(v, &format!("{path}.else_block"))?),
            };
            if let Some(extra) = obj.keys().next() {
                return Err(schema(path, format!("unknown field `{extra}`")));
            }
            Ok(Block::If(Conditional {
                condition,
                then_block,
                else_block,
            }))
        }
        _ => Err(schema(format!("{path}.type"), "expected \"op\" or \"if\"")),
    }
}

fn script_from_value(v: Value) -> Result<Script, ScriptError> {
    let Value::Object(mut obj) = v else {
        return Err(schema(".", "expected a script object"));
    };
    let version = match take_field(&mut obj, "version", ".")? {
        Value::String(s) => ScriptVersion::parse(&s)?,
        _ => return Err(schema("version", "expected a string")),
    };
    let name: String = typed(take_field(&mut obj, "name", ".")?, "name")?;
    let blocks = parse_blocks(take_field(&mut obj, "blocks", ".")?, "blocks")?;
    let parameters = match obj.remove("parameters") {
        None => Vec::new(),
        Some(v) => typed(v, "parameters")?,
    };
    if let Some(extra) = obj.keys().next() {
        return Err(schema(".", format!("unknown field `{extra}`")));
    }
    Ok(Script {
        version,
        name,
        blocks,
        parameters,
    })
}

impl<'de> Deserialize<'de> for Script {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        script_from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Canonical pretty-printed JSON.
pub fn serialize_script(s: &Script) -> String {
    let mut out = serde_json::to_string_pretty(s).expect("script serialization is infallible");
    out.push('\n');
    out
}

pub fn deserialize_script(document: &str) -> Result<Script, ScriptError> {
    let v: Value = serde_json::from_str(document).map_err(|e| schema(".", e.to_string()))?;
    script_from_value(v)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

fn finding(location: impl Into<String>, message: impl Into<String>) -> Finding {
    Finding {
        location: location.into(),
        message: message.into(),
    }
}

/// Checks structural invariants; an empty list means the script is valid.
pub fn validate(s: &Script) -> Vec<Finding> {
    let mut out = Vec::new();
    if s.blocks.is_empty() {
        out.push(finding("blocks", "script has no blocks"));
    }
    let param_names: HashSet<&str> = s.parameters.iter().map(|p| p.name.as_str()).collect();
    let mut declared: HashSet<String> = param_names.iter().map(|s| s.to_string()).collect();
    for (i, block) in s.indexed_blocks() {
        let loc = format!("block {i}");
        match block {
            Block::Op(op) => {
                if op.kind.targets_element() {
                    if op.target_query.is_none() {
                        out.push(finding(&loc, format!("{} requires a target query", op.kind)));
                    }
                    if op.snapshot.is_none() {
                        out.push(finding(&loc, format!("{} requires a snapshot", op.kind)));
                    }
                }
                for q in op.target_query.iter().chain(&op.alt_query) {
                    if let Err(e) = q.validate() {
                        out.push(finding(&loc, e.to_string()));
                    }
                }
                match op.kind {
                    OpKind::SetText if op.text_arg.is_none() => {
                        out.push(finding(&loc, "SET_TEXT requires text_arg"));
                    }
                    OpKind::Pause if !op.wait_for_user && !op.duration_s.is_some_and(|d| d > 0.0) => {
                        out.push(finding(&loc, "PAUSE requires duration_s > 0 or wait_for_user"));
                    }
                    OpKind::Launch if op.app.is_none() => {
                        out.push(finding(&loc, "LAUNCH requires an app"));
                    }
                    OpKind::ExtractValue => match &op.variable_name {
                        Some(v) => {
                            declared.insert(v.clone());
                        }
                        None => out.push(finding(&loc, "EXTRACT_VALUE requires variable_name")),
                    },
                    _ => {}
                }
            }
            Block::If(c) => {
                for v in c.condition.variables() {
                    if !declared.contains(v) {
                        out.push(finding(&loc, format!("condition references undeclared variable `{v}`")));
                    }
                }
            }
        }
    }
    for (pi, p) in s.parameters.iter().enumerate() {
        let loc = format!("parameters[{pi}]");
        if p.possible_values.is_empty() {
            out.push(finding(&loc, "possible_values is empty"));
        }
        match s.operation(p.bound_op) {
            None => out.push(finding(&loc, format!("bound_op {} is not an operation", p.bound_op))),
            Some(op) if !op.kind.targets_element() => {
                out.push(finding(&loc, format!("bound to a {} operation", op.kind)));
            }
            Some(op) => {
                let all_plain = p.possible_values.iter().all(|v| !v.is_hidden());
                let query_plain = op.target_query.as_ref().is_some_and(|q| !q.contains_hidden());
                if s.version == ScriptVersion::Plain && all_plain && query_plain {
                    let values: HashSet<&str> = p.possible_values.iter().filter_map(Slot::as_plain).collect();
                    let bound = op.target_query.as_ref().is_some_and(|q| {
                        string_refs(q)
                            .iter()
                            .any(|r| r.property == Property::Text && values.contains(r.value.as_str()))
                    });
                    if !bound {
                        out.push(finding(&loc, "bound query has no text equal to a possible value"));
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Recording

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoEvent {
    pub action: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screen: Option<Screen>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typed_text: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub menu_choice: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

impl DemoEvent {
    pub fn on(action: OpKind, screen: Screen, target: impl Into<String>) -> Self {
        Self {
            action,
            screen: Some(screen),
            target: Some(target.into()),
            typed_text: None,
            menu_choice: false,
            parameter_name: None,
            variable_name: None,
            duration_s: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoTrace {
    pub name: String,
    pub events: Vec<DemoEvent>,
}

pub fn load_trace(document: &str) -> Result<DemoTrace, ScriptError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    serde_path_to_error::deserialize(de).map_err(|e| schema(e.path().to_string(), e.inner().to_string()))
}

/// The recorder's primary description: own text if it is unique, else a
/// unique view id, else class plus a distinguishing flag (with an ordinal
/// when still ambiguous).
pub fn default_description(g: &UiSnapshotGraph, target: usize) -> Query {
    let unique = |q: &Query| evaluate(q, g) == [g.id_at(target)];
    let class = Query::class(g.class_name(target).unwrap_or_default());
    if let Some(text) = g.literal(target, Predicate::HasText).filter(|t| !t.trim().is_empty()) {
        let q = Query::all(vec![class.clone(), Query::text(text)]);
        if unique(&q) {
            return q;
        }
    }
    if let Some(v) = g.literal(target, Predicate::HasViewId) {
        let q = Query::view_id(v);
        if unique(&q) {
            return q;
        }
    }
    let flags: Vec<Flag> = [Flag::Clickable, Flag::Focused, Flag::Scrollable]
        .into_iter()
        .filter(|f| g.flag(target, f.predicate()))
        .collect();
    for f in &flags {
        let q = Query::all(vec![class.clone(), Query::Flag(*f)]);
        if unique(&q) {
            return q;
        }
    }
    let base = match flags.first() {
        Some(f) => Query::all(vec![class.clone(), Query::Flag(*f)]),
        None => class,
    };
    if unique(&base) {
        return base;
    }
    let idx = evaluate(&base, g)
        .iter()
        .position(|id| id == g.id_at(target))
        .expect("target matches its own class description");
    Query::nth(idx as u32 + 1, base)
}

/// Builds a script from a demonstration trace.
pub fn record_from_trace(trace: &DemoTrace) -> Result<Script, ScriptError> {
    if trace.events.is_empty() {
        return Err(ScriptError::Record {
            event: 0,
            message: "trace has no events".into(),
        });
    }
    let mut blocks = Vec::new();
    let mut parameters = Vec::new();
    for (i, ev) in trace.events.iter().enumerate() {
        let err = |message: String| ScriptError::Record { event: i, message };
        let mut op = Operation::new(ev.action);
        if ev.action.targets_element() {
            let screen = ev.screen.as_ref().ok_or_else(|| err("event has no screen".into()))?;
            let target = ev.target.as_deref().ok_or_else(|| err("event has no target".into()))?;
            let g = screen.graph();
            let pos = g
                .position(target)
                .ok_or_else(|| err(format!("target element `{target}` is not on the screen")))?;
            let q = default_description(&g, pos);
            if evaluate(&q, &g) != [target] {
                return Err(err(format!("element `{target}` is ambiguous under every description")));
            }
            op.target_query = Some(q);
            op.snapshot = Some(screen.clone());
            if ev.menu_choice {
                let values = g.same_class_sibling_texts(pos);
                if values.is_empty() {
                    return Err(err(format!("menu choice `{target}` has no text options")));
                }
                let name = ev
                    .parameter_name
                    .clone()
                    .unwrap_or_else(|| format!("param{}", parameters.len() + 1));
                parameters.push(Parameter {
                    name,
                    bound_op: blocks.len(),
                    possible_values: values.into_iter().map(Slot::Plain).collect(),
                });
            }
        } else if let Some(screen) = &ev.screen {
            op.snapshot = Some(screen.clone());
        }
        match ev.action {
            OpKind::SetText => {
                let text = ev.typed_text.clone().ok_or_else(|| err("SET_TEXT event has no typed_text".into()))?;
                op.text_arg = Some(Slot::Plain(text));
            }
            OpKind::ExtractValue => {
                op.variable_name = Some(ev.variable_name.clone().unwrap_or_else(|| format!("value{}", i + 1)));
            }
            OpKind::Pause => {
                op.duration_s = ev.duration_s;
                op.wait_for_user = ev.duration_s.is_none();
            }
            OpKind::Launch => {
                let screen = ev.screen.as_ref().ok_or_else(|| err("LAUNCH event has no screen".into()))?;
                op.app = Some(screen.context.clone());
                op.snapshot = None;
            }
            _ => {}
        }
        blocks.push(Block::Op(op));
    }
    Ok(Script {
        version: ScriptVersion::Plain,
        name: trace.name.clone(),
        blocks,
        parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse_query;
    use crate::ui_model::{Bounds, UiElement};

    fn ctx() -> AppContext {
        AppContext::new("com.coffee", "Order").unwrap()
    }

    fn size_menu() -> Screen {
        let root = UiElement::new("LinearLayout", Bounds::new(0, 0, 300, 300)).with_children(vec![
            UiElement::new("TextView", Bounds::new(0, 0, 300, 30)).with_text("Pick a size"),
            UiElement::new("ListView", Bounds::new(0, 40, 300, 200)).with_children(vec![
                UiElement::new("CheckedTextView", Bounds::new(0, 40, 300, 80)).with_text("tall").clickable(),
                UiElement::new("CheckedTextView", Bounds::new(0, 80, 300, 120)).with_text("grande").clickable(),
                UiElement::new("CheckedTextView", Bounds::new(0, 120, 300, 160)).with_text("venti").clickable(),
            ]),
            UiElement::new("Button", Bounds::new(0, 250, 300, 290)).with_text("next").clickable(),
        ]);
        Screen::new(ctx(), root).unwrap()
    }

    fn trace_of(events: Vec<DemoEvent>) -> DemoTrace {
        DemoTrace {
            name: "order".into(),
            events,
        }
    }

    #[test]
    fn menu_choice_becomes_parameter() {
        let screen = size_menu();
        let venti = screen.root.walk().into_iter().find(|e| e.plain_text() == Some("venti")).unwrap().element_id.clone();
        let mut ev = DemoEvent::on(OpKind::Click, screen, venti);
        ev.menu_choice = true;
        let s = record_from_trace(&trace_of(vec![ev])).unwrap();
        assert_eq!(s.parameters.len(), 1);
        let values: Vec<_> = s.parameters[0].possible_values.iter().map(|v| v.as_plain().unwrap()).collect();
        assert_eq!(values, ["tall", "grande", "venti"]);
        assert_eq!(s.parameters[0].bound_op, 0);
        assert!(validate(&s).is_empty(), "{:?}", validate(&s));
    }

    #[test]
    fn single_click_on_next() {
        let screen = size_menu();
        let s = record_from_trace(&trace_of(vec![DemoEvent::on(OpKind::Click, screen, "e7")])).unwrap();
        assert_eq!(s.blocks.len(), 1);
        let Block::Op(op) = &s.blocks[0] else { panic!() };
        assert_eq!(op.target_query, Some(parse_query(r#"(conj (class "Button") (text "next"))"#).unwrap()));
    }

    #[test]
    fn set_text_uses_class_and_flag() {
        let mut focused = UiElement::new("EditText", Bounds::new(0, 0, 100, 20)).clickable();
        focused.focused = true;
        let root = UiElement::new("LinearLayout", Bounds::new(0, 0, 100, 100)).with_children(vec![
            focused,
            UiElement::new("EditText", Bounds::new(0, 30, 100, 50)).clickable(),
        ]);
        let screen = Screen::new(ctx(), root).unwrap();
        let mut ev = DemoEvent::on(OpKind::SetText, screen, "e2");
        ev.typed_text = Some("hello".into());
        let s = record_from_trace(&trace_of(vec![ev])).unwrap();
        let op = s.operation(0).unwrap();
        assert_eq!(op.text_arg, Some(Slot::plain("hello")));
        assert_eq!(
            op.target_query,
            Some(parse_query(r#"(conj (class "EditText") (focused))"#).unwrap())
        );
    }

    #[test]
    fn ordinal_fallback() {
        let root = UiElement::new("L", Bounds::new(0, 0, 100, 100)).with_children(vec![
            UiElement::new("ImageButton", Bounds::new(0, 0, 10, 10)).clickable(),
            UiElement::new("ImageButton", Bounds::new(0, 20, 10, 30)).clickable(),
        ]);
        let screen = Screen::new(ctx(), root).unwrap();
        let s = record_from_trace(&trace_of(vec![DemoEvent::on(OpKind::Click, screen, "e3")])).unwrap();
        assert_eq!(
            s.operation(0).unwrap().target_query.as_ref().unwrap().to_string(),
            r#"(nth 2 (conj (class "ImageButton") (clickable)))"#
        );
    }

    #[test]
    fn recording_errors() {
        assert!(record_from_trace(&trace_of(vec![])).is_err());
        let err = record_from_trace(&trace_of(vec![DemoEvent::on(OpKind::Click, size_menu(), "e99")])).unwrap_err();
        assert!(err.to_string().contains("e99"));
    }

    fn sample_script() -> Script {
        let screen = size_menu();
        let mut ev = DemoEvent::on(OpKind::Click, screen.clone(), "e5");
        ev.menu_choice = true;
        ev.parameter_name = Some("size".into());
        let mut extract = DemoEvent::on(OpKind::ExtractValue, screen, "e2");
        extract.variable_name = Some("title".into());
        let pause = DemoEvent {
            action: OpKind::Pause,
            screen: None,
            target: None,
            typed_text: None,
            menu_choice: false,
            parameter_name: None,
            variable_name: None,
            duration_s: Some(1.5),
        };
        let mut s = record_from_trace(&trace_of(vec![ev, extract, pause])).unwrap();
        s.blocks.push(Block::If(Conditional {
            condition: Condition::Cmp {
                op: Comparator::Ne,
                left: Operand::Var("title".into()),
                right: Operand::Lit(Slot::plain("Closed")),
            },
            then_block: vec![Block::Op(s.operation(0).unwrap().clone())],
            else_block: None,
        }));
        s
    }

    #[test]
    fn serialization_round_trip_is_canonical() {
        let s = sample_script();
        let text = serialize_script(&s);
        let back = deserialize_script(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(serialize_script(&back), text);
        assert!(text.contains("\"version\": \"pinalite-script/1\""));
        // snapshots store the tree only
        assert!(!text.contains("HAS_CLASS_NAME"));
        assert!(validate(&back).is_empty(), "{:?}", validate(&back));
        assert_eq!(back.block_count(), 5);
        assert!(back.operation(4).is_some(), "then-branch op is block 4");
    }

    #[test]
    fn unknown_kind_names_its_path() {
        let mut v: Value = serde_json::from_str(&serialize_script(&sample_script())).unwrap();
        v["blocks"][1]["kind"] = Value::String("SWIPE".into());
        let err = deserialize_script(&v.to_string()).unwrap_err();
        match err {
            ScriptError::Schema { path, .. } => assert_eq!(path, "blocks[1].kind"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_error_paths() {
        let mut v: Value = serde_json::from_str(&serialize_script(&sample_script())).unwrap();
        v["blocks"][3]["then_block"][0]["target_query"] = Value::String("(text)".into());
        let err = deserialize_script(&v.to_string()).unwrap_err();
        assert!(matches!(err, ScriptError::Schema { ref path, .. } if path == "blocks[3].then_block[0].target_query"), "{err:?}");
    }

    #[test]
    fn unknown_version_rejected() {
        let mut v: Value = serde_json::from_str(&serialize_script(&sample_script())).unwrap();
        v["version"] = Value::String("pinalite-script/2".into());
        assert_eq!(
            deserialize_script(&v.to_string()),
            Err(ScriptError::UnsupportedVersion("pinalite-script/2".into()))
        );
    }

    #[test]
    fn validation_findings() {
        let mut s = sample_script();
        if let Some(op) = s.operation_mut(0) {
            op.snapshot = None;
        }
        let f = validate(&s);
        assert_eq!(f.len(), 1);
        assert!(f[0].message.contains("snapshot"));

        let mut s = sample_script();
        s.parameters[0].bound_op = 2; // the PAUSE
        let f = validate(&s);
        assert!(f.iter().any(|f| f.message.contains("PAUSE")), "{f:?}");

        let mut s = sample_script();
        s.parameters[0].possible_values = vec![Slot::plain("trenta")];
        assert!(!validate(&s).is_empty());

        let mut s = sample_script();
        if let Block::If(c) = &mut s.blocks[3] {
            c.condition = Condition::Cmp {
                op: Comparator::Eq,
                left: Operand::Var("ghost".into()),
                right: Operand::Lit(Slot::plain("x")),
            };
        }
        assert!(validate(&s).iter().any(|f| f.message.contains("ghost")));
    }

    #[test]
    fn condition_typing() {
        let vars = |name: &str| match name {
            "n" => Some("10".to_string()),
            "s" => Some("abc".to_string()),
            _ => None,
        };
        let cmp = |op, l: Operand, r: Operand| Condition::Cmp { op, left: l, right: r };
        let lit = |s: &str| Operand::Lit(Slot::plain(s));
        let var = |s: &str| Operand::Var(s.into());
        // numeric: 10 > 9; string order would say "10" < "9"
        assert!(cmp(Comparator::Gt, var("n"), lit("9")).evaluate(&vars).unwrap());
        assert!(cmp(Comparator::Eq, var("n"), lit("10.0")).evaluate(&vars).unwrap());
        assert!(cmp(Comparator::Lt, var("s"), lit("abd")).evaluate(&vars).unwrap());
        assert!(cmp(Comparator::Ne, var("s"), lit("10")).evaluate(&vars).unwrap());
        assert_eq!(
            cmp(Comparator::Eq, var("zz"), lit("1")).evaluate(&vars),
            Err(ConditionError::Unbound("zz".into()))
        );
        let both = Condition::All(vec![
            cmp(Comparator::Ge, var("n"), lit("10")),
            Condition::Any(vec![cmp(Comparator::Eq, var("s"), lit("x")), cmp(Comparator::Le, var("n"), lit("-3"))]),
        ]);
        assert!(!both.evaluate(&vars).unwrap());
    }
}
