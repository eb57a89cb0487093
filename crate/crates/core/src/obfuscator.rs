//! Share-time privacy pipeline: scan every string a script carries, classify
//! each distinct `(context, content)` pair with one batched uniqueness call,
//! let the author override labels, then hide personal strings behind their
//! salted hashes and synthesize alternative queries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{client_hash_context, client_hash_pair, HashError, SaltedHash, UserId};
use crate::query::{evaluate, string_refs, synthesize_alternative, HiddenProperty, Property, Query};
use crate::script::{Block, Finding, Script, ScriptVersion};
use crate::server::{AggregationService, ServiceError, UniquenessQuery, UniquenessRequest, UniquenessVerdict};
use crate::slot::Slot;
use crate::ui_model::{AppContext, UiElement};

#[derive(Debug, Error)]
pub enum ObfuscateError {
    #[error("classification unavailable, refusing to share: {0}")]
    Unavailable(#[from] ServiceError),
    #[error("server answered {got} verdicts for {want} entries")]
    VerdictCount { want: usize, got: usize },
    #[error("unknown entry id {0}")]
    UnknownEntry(usize),
    #[error("report does not cover the script: {0}")]
    ReportMismatch(String),
    #[error("leak sweep failed: personal entry {entry_id} still appears in plaintext at {location}")]
    Leak { entry_id: usize, location: String },
    #[error(transparent)]
    Hash(#[from] HashError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LocationKind {
    QueryString,
    ParameterValue,
    SnapshotText,
    ConditionLiteral,
}

/// Where one string lives in a script. `detail` is one of
/// `target_query/<path>`, `alt_query/<path>`, `text_arg`,
/// `snapshot/<element>/text`, `snapshot/<element>/content_desc`,
/// `condition/<operand path>` or `parameter/<name>[<i>]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryLocation {
    pub kind: LocationKind,
    pub block_index: usize,
    pub detail: String,
}

impl fmt::Display for EntryLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {} {}", self.block_index, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScannedString {
    pub location: EntryLocation,
    pub context: AppContext,
    pub content: String,
}

/// Context used for condition literals when no snapshot precedes them.
pub fn condition_fallback_context() -> AppContext {
    AppContext::new("pinalite.condition", "literal").expect("constant context is valid")
}

/// Per-block context: the block's own snapshot, else the nearest preceding
/// one, else the condition fallback.
fn block_contexts(s: &Script) -> Vec<AppContext> {
    let mut last: Option<AppContext> = None;
    s.indexed_blocks()
        .into_iter()
        .map(|(_, b)| {
            if let Block::Op(op) = b {
                if let Some(sn) = &op.snapshot {
                    last = Some(sn.context.clone());
                }
            }
            last.clone().unwrap_or_else(condition_fallback_context)
        })
        .collect()
}

fn path_detail(prefix: &str, path: &[usize]) -> String {
    let mut d = prefix.to_owned();
    for p in path {
        d.push('/');
        d.push_str(&p.to_string());
    }
    d
}

/// Visits every plaintext content slot of the script in a fixed order.
/// The callback may replace the slot by returning a salted hash.
fn walk_slots(
    s: &mut Script,
    f: &mut dyn FnMut(EntryLocation, &AppContext, &str) -> Option<SaltedHash>,
) {
    let contexts = block_contexts(s);
    let loc = |kind, block_index, detail: String| EntryLocation {
        kind,
        block_index,
        detail,
    };
    s.for_each_block_mut(|i, b| {
        let ctx = &contexts[i];
        match b {
            Block::Op(op) => {
                for (name, query) in [("target_query", &mut op.target_query), ("alt_query", &mut op.alt_query)] {
                    let Some(q) = query.as_mut() else { continue };
                    for r in string_refs(q) {
                        let l = loc(LocationKind::QueryString, i, path_detail(name, &r.path));
                        if let Some(h) = f(l, ctx, &r.value) {
                            let hp = match r.property {
                                Property::ContentDesc => HiddenProperty::ContentDesc,
                                _ => HiddenProperty::Text,
                            };
                            *q.at_mut(&r.path).expect("string ref path resolves") = Query::Hidden(hp, h);
                        }
                    }
                }
                if let Some(Slot::Plain(text)) = &op.text_arg {
                    if let Some(h) = f(loc(LocationKind::QueryString, i, "text_arg".into()), ctx, text) {
                        op.text_arg = Some(Slot::Hidden(h));
                    }
                }
                if let Some(sn) = op.snapshot.as_mut() {
                    let sctx = sn.context.clone();
                    visit_elements(&mut sn.root, &mut |e: &mut UiElement| {
                        let id = e.element_id.clone();
                        for (field, slot) in [("text", &mut e.text), ("content_desc", &mut e.content_description)] {
                            if let Some(Slot::Plain(v)) = slot.as_ref() {
                                if v.trim().is_empty() {
                                    continue;
                                }
                                let l = loc(LocationKind::SnapshotText, i, format!("snapshot/{id}/{field}"));
                                if let Some(h) = f(l, &sctx, v) {
                                    *slot = Some(Slot::Hidden(h));
                                }
                            }
                        }
                    });
                }
            }
            Block::If(c) => {
                for (path, slot) in c.condition.literals_mut() {
                    if let Slot::Plain(v) = slot {
                        let l = loc(LocationKind::ConditionLiteral, i, format!("condition/{path}"));
                        if let Some(h) = f(l, ctx, v) {
                            *slot = Slot::Hidden(h);
                        }
                    }
                }
            }
        }
    });
    for p in &mut s.parameters {
        let ctx = contexts.get(p.bound_op).cloned().unwrap_or_else(condition_fallback_context);
        for (vi, v) in p.possible_values.iter_mut().enumerate() {
            if let Slot::Plain(text) = v {
                let l = loc(LocationKind::ParameterValue, p.bound_op, format!("parameter/{}[{vi}]", p.name));
                if let Some(h) = f(l, &ctx, text) {
                    *v = Slot::Hidden(h);
                }
            }
        }
    }
}

fn visit_elements(e: &mut UiElement, f: &mut dyn FnMut(&mut UiElement)) {
    f(e);
    for c in &mut e.children {
        visit_elements(c, f);
    }
}

/// Every plaintext content string the script would reveal if shared as is.
pub fn scan(s: &Script) -> Vec<ScannedString> {
    let mut out = Vec::new();
    let mut copy = s.clone();
    walk_slots(&mut copy, &mut |location, ctx, content| {
        if !content.trim().is_empty() {
            out.push(ScannedString {
                location,
                context: ctx.clone(),
                content: content.to_owned(),
            });
        }
        None
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedEntry {
    pub entry_id: usize,
    pub context: AppContext,
    /// Author-local only; never written into shared output.
    pub content: String,
    pub locations: Vec<EntryLocation>,
    #[serde(flatten)]
    pub verdict: UniquenessVerdict,
    #[serde(rename = "override", default, skip_serializing_if = "Option::is_none")]
    pub override_public: Option<bool>,
    pub final_public: bool,
    pub salted_hash: SaltedHash,
}

impl ClassifiedEntry {
    fn refresh(&mut self) {
        self.final_public = self.override_public.unwrap_or(self.verdict.public);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub public: usize,
    pub personal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationReport {
    pub script: String,
    pub entries: Vec<ClassifiedEntry>,
    pub counts: Counts,
}

/// `{entry_id: public}` as read from an overrides file.
pub type Overrides = BTreeMap<usize, bool>;

impl ObfuscationReport {
    fn recount(&mut self) {
        let public = self.entries.iter().filter(|e| e.final_public).count();
        self.counts = Counts {
            public,
            personal: self.entries.len() - public,
        };
    }

    pub fn entry(&self, entry_id: usize) -> Option<&ClassifiedEntry> {
        self.entries.get(entry_id).filter(|e| e.entry_id == entry_id)
    }

    fn entry_mut(&mut self, entry_id: usize) -> Result<&mut ClassifiedEntry, ObfuscateError> {
        self.entries
            .get_mut(entry_id)
            .filter(|e| e.entry_id == entry_id)
            .ok_or(ObfuscateError::UnknownEntry(entry_id))
    }

    /// Records the author's label for one entry.
    pub fn apply_override(&mut self, entry_id: usize, public: bool) -> Result<&ClassifiedEntry, ObfuscateError> {
        let e = self.entry_mut(entry_id)?;
        e.override_public = Some(public);
        e.refresh();
        self.recount();
        Ok(&self.entries[entry_id])
    }

    /// Returns an entry to its server verdict.
    pub fn clear_override(&mut self, entry_id: usize) -> Result<&ClassifiedEntry, ObfuscateError> {
        let e = self.entry_mut(entry_id)?;
        e.override_public = None;
        e.refresh();
        self.recount();
        Ok(&self.entries[entry_id])
    }

    /// Sets the final label, storing an override only when it departs from
    /// the verdict. Used by the interactive review.
    pub fn toggle(&mut self, entry_id: usize, public: bool) -> Result<&ClassifiedEntry, ObfuscateError> {
        if self.entry_mut(entry_id)?.verdict.public == public {
            self.clear_override(entry_id)
        } else {
            self.apply_override(entry_id, public)
        }
    }

    pub fn apply_overrides(&mut self, overrides: &Overrides) -> Result<(), ObfuscateError> {
        for (&id, &public) in overrides {
            self.apply_override(id, public)?;
        }
        Ok(())
    }

    /// The overrides currently recorded, in file form.
    pub fn overrides(&self) -> Overrides {
        self.entries
            .iter()
            .filter_map(|e| e.override_public.map(|p| (e.entry_id, p)))
            .collect()
    }

    fn lookup(&self) -> HashMap<(&AppContext, &str), &ClassifiedEntry> {
        self.entries.iter().map(|e| ((&e.context, e.content.as_str()), e)).collect()
    }
}

/// Deduplicates the scan and classifies all entries with a single batched
/// uniqueness request. Any server failure aborts (fail closed).
pub fn classify(
    s: &Script,
    service: &dyn AggregationService,
    user: &UserId,
) -> Result<ObfuscationReport, ObfuscateError> {
    let mut keys: Vec<(AppContext, String)> = Vec::new();
    let mut locations: Vec<Vec<EntryLocation>> = Vec::new();
    let mut index: HashMap<(AppContext, String), usize> = HashMap::new();
    for item in scan(s) {
        let key = (item.context, item.content);
        let id = *index.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            locations.push(Vec::new());
            keys.len() - 1
        });
        locations[id].push(item.location);
    }
    let mut entries = Vec::with_capacity(keys.len());
    if !keys.is_empty() {
        let queries = keys
            .iter()
            .map(|(ctx, content)| {
                Ok(UniquenessQuery {
                    context_hash: client_hash_context(ctx)?,
                    pair_hash: client_hash_pair(ctx, content)?,
                })
            })
            .collect::<Result<Vec<_>, HashError>>()?;
        let resp = service.uniqueness(&UniquenessRequest {
            user_id: user.clone(),
            queries,
        })?;
        if resp.results.len() != keys.len() {
            return Err(ObfuscateError::VerdictCount {
                want: keys.len(),
                got: resp.results.len(),
            });
        }
        for (entry_id, (((context, content), locations), r)) in
            keys.into_iter().zip(locations).zip(resp.results).enumerate()
        {
            entries.push(ClassifiedEntry {
                entry_id,
                context,
                content,
                locations,
                verdict: r.verdict,
                override_public: None,
                final_public: r.verdict.public,
                salted_hash: r.salted_pair_hash,
            });
        }
    }
    let mut report = ObfuscationReport {
        script: s.name.clone(),
        entries,
        counts: Counts::default(),
    };
    report.recount();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedOutput {
    pub script: Script,
    /// Non-fatal problems, e.g. operations left without an alternative query.
    pub warnings: Vec<Finding>,
}

/// Produces the shareable script. Every final-personal string is replaced by
/// its salted hash; each element-targeting operation gets an alternative
/// query built only from public strings; a leak sweep over all remaining
/// plaintext must pass before anything is returned.
pub fn obfuscate(s: &Script, report: &ObfuscationReport) -> Result<SharedOutput, ObfuscateError> {
    let lookup = report.lookup();
    for item in scan(s) {
        if !lookup.contains_key(&(&item.context, item.content.as_str())) {
            return Err(ObfuscateError::ReportMismatch(format!("no entry for {}", item.location)));
        }
    }
    let personal_by_ctx: HashMap<&AppContext, HashSet<String>> =
        report.entries.iter().filter(|e| !e.final_public).fold(HashMap::new(), |mut m, e| {
            m.entry(&e.context).or_default().insert(e.content.clone());
            m
        });
    let empty = HashSet::new();

    let mut out = s.clone();
    out.version = ScriptVersion::Shared;
    let mut warnings = Vec::new();

    // Alternative queries come from the plaintext snapshot, before hiding.
    let mut alts: Vec<(usize, Option<Query>)> = Vec::new();
    for (i, op) in s.operations() {
        if !op.kind.targets_element() {
            continue;
        }
        let (Some(q), Some(sn)) = (&op.target_query, &op.snapshot) else {
            continue;
        };
        let g = sn.graph();
        let personal = personal_by_ctx.get(&sn.context).unwrap_or(&empty);
        let alt = match evaluate(q, &g).as_slice() {
            [target] => match synthesize_alternative(&g, target, personal) {
                Ok(a) => Some(a),
                Err(e) => {
                    warnings.push(Finding {
                        location: format!("block {i}"),
                        message: format!("no alternative query: {e}"),
                    });
                    None
                }
            },
            hits => {
                warnings.push(Finding {
                    location: format!("block {i}"),
                    message: format!("target query matches {} elements on its own snapshot", hits.len()),
                });
                None
            }
        };
        alts.push((i, alt));
    }
    for (i, alt) in alts {
        if let Some(op) = out.operation_mut(i) {
            op.alt_query = alt;
        }
    }

    walk_slots(&mut out, &mut |_, ctx, content| {
        let e = lookup.get(&(ctx, content))?;
        (!e.final_public).then(|| e.salted_hash.clone())
    });

    leak_sweep(&out, report)?;
    Ok(SharedOutput { script: out, warnings })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StringKind {
    /// Screen or author content: texts, descriptions, arguments, names.
    Content,
    /// Developer-assigned and identical for every user: class names, view
    /// ids, package and activity names.
    Identifier,
}

/// All plaintext strings in a script with a label for diagnostics.
/// Element ids and hash digests are excluded; they are generated, not content.
pub fn plaintext_strings(s: &Script) -> Vec<(String, StringKind, String)> {
    use StringKind::*;
    let mut out: Vec<(String, StringKind, String)> = vec![("name".into(), Content, s.name.clone())];
    let query_strings = |label: String, q: &Query, out: &mut Vec<(String, StringKind, String)>| {
        let content: HashSet<String> = string_refs(q).into_iter().map(|r| r.value).collect();
        for lit in q.literals() {
            let kind = if content.contains(lit) { Content } else { Identifier };
            out.push((label.clone(), kind, lit.to_owned()));
        }
    };
    for (i, b) in s.indexed_blocks() {
        match b {
            Block::Op(op) => {
                for (name, q) in [("target_query", &op.target_query), ("alt_query", &op.alt_query)] {
                    if let Some(q) = q {
                        query_strings(format!("block {i} {name}"), q, &mut out);
                    }
                }
                if let Some(Slot::Plain(t)) = &op.text_arg {
                    out.push((format!("block {i} text_arg"), Content, t.clone()));
                }
                if let Some(v) = &op.variable_name {
                    out.push((format!("block {i} variable_name"), Content, v.clone()));
                }
                let contexts = op.app.iter().chain(op.snapshot.as_ref().map(|sn| &sn.context));
                for c in contexts {
                    out.push((format!("block {i} context"), Identifier, c.package_name().to_owned()));
                    out.push((format!("block {i} context"), Identifier, c.activity_name().to_owned()));
                }
                if let Some(sn) = &op.snapshot {
                    for e in sn.root.walk() {
                        let label = format!("block {i} snapshot/{}", e.element_id);
                        out.push((label.clone(), Identifier, e.class_name.clone()));
                        for v in [&e.text, &e.content_description].into_iter().flatten() {
                            if let Slot::Plain(v) = v {
                                out.push((label.clone(), Content, v.clone()));
                            }
                        }
                        if let Some(v) = &e.view_id {
                            out.push((label.clone(), Identifier, v.clone()));
                        }
                    }
                }
            }
            Block::If(c) => {
                for v in c.condition.variables() {
                    out.push((format!("block {i} condition"), Content, v.to_owned()));
                }
                for (path, lit) in c.condition.literals() {
                    if let Slot::Plain(v) = lit {
                        out.push((format!("block {i} condition/{path}"), Content, v));
                    }
                }
            }
        }
    }
    for p in &s.parameters {
        let label = format!("parameter {}", p.name);
        out.push((label.clone(), Content, p.name.clone()));
        for v in &p.possible_values {
            if let Slot::Plain(v) = v {
                out.push((label.clone(), Content, v.clone()));
            }
        }
    }
    out
}

/// Fails if any final-personal content occurs inside a plaintext content
/// string, or equals a developer identifier.
pub fn leak_sweep(shared: &Script, report: &ObfuscationReport) -> Result<(), ObfuscateError> {
    let strings = plaintext_strings(shared);
    for e in report.entries.iter().filter(|e| !e.final_public) {
        let needle = e.content.as_str();
        let hit = strings.iter().find(|(_, kind, s)| match kind {
            StringKind::Content => s.contains(needle),
            StringKind::Identifier => s == needle,
        });
        if let Some((label, _, _)) = hit {
            return Err(ObfuscateError::Leak {
                entry_id: e.entry_id,
                location: label.clone(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Review rendering

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewSlot {
    pub entry_id: usize,
    pub content: String,
    pub kind: LocationKind,
    pub location: String,
    pub public: bool,
}

/// One readable step of the script with every string it carries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewStep {
    pub block_index: usize,
    pub summary: String,
    pub slots: Vec<PreviewSlot>,
}

fn describe_target(q: &Query) -> String {
    let mut class = None;
    q.visit(&mut Vec::new(), &mut |_, node| {
        if let Query::Property(Property::Class, c) = node {
            class.get_or_insert_with(|| c.clone());
        }
    });
    let label = string_refs(q).into_iter().next().map(|r| r.value);
    match (class, label) {
        (Some(c), Some(l)) => format!("{c} \"{l}\""),
        (Some(c), None) => c,
        (None, Some(l)) => format!("\"{l}\""),
        (None, None) => q.to_string(),
    }
}

/// Step list for the review screen: each block with the classification of
/// every string location inside it.
pub fn preview(s: &Script, report: &ObfuscationReport) -> Vec<PreviewStep> {
    let mut steps: Vec<PreviewStep> = s
        .indexed_blocks()
        .into_iter()
        .map(|(block_index, b)| {
            let summary = match b {
                Block::Op(op) => {
                    let mut text = op.kind.to_string();
                    if let Some(q) = &op.target_query {
                        text = format!("{text} {}", describe_target(q));
                    }
                    if let Some(Slot::Plain(v)) = &op.text_arg {
                        text = format!("{text} with \"{v}\"");
                    }
                    if let Some(var) = &op.variable_name {
                        text = format!("{text} into `{var}`");
                    }
                    text
                }
                Block::If(c) => format!(
                    "IF {}",
                    serde_json::to_string(&c.condition).expect("conditions serialize")
                ),
            };
            PreviewStep {
                block_index,
                summary,
                slots: Vec::new(),
            }
        })
        .collect();
    for e in &report.entries {
        for loc in &e.locations {
            if let Some(step) = steps.get_mut(loc.block_index) {
                step.slots.push(PreviewSlot {
                    entry_id: e.entry_id,
                    content: e.content.clone(),
                    kind: loc.kind,
                    location: loc.detail.clone(),
                    public: e.final_public,
                });
            }
        }
    }
    for step in &mut steps {
        step.slots.sort_by(|a, b| (a.kind, &a.location).cmp(&(b.kind, &b.location)));
    }
    steps
}
