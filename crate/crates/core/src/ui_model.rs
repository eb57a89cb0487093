//! App screens as element trees and as UI snapshot graphs.
//!
//! A screen file holds one element tree plus its app context. Converting it to
//! a [`UiSnapshotGraph`] yields `(subject, predicate, object)` triples over
//! element entities: property triples, hierarchy edges, sibling spatial
//! relations and a couple of semantic annotations (prices, dates).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::hashing::{SaltedHash, DELIMITER};
use crate::slot::Slot;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UiError {
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("duplicate element id `{id}`")]
    DuplicateId { id: String },
    #[error("invalid bounds at `{path}`: left <= right and top <= bottom required")]
    InvalidBounds { path: String },
    #[error("empty class name at `{path}`")]
    EmptyClass { path: String },
    #[error("invalid app context: {0}")]
    Context(String),
    #[error("whitespace-only content cannot form an information entry")]
    EmptyContent,
}

/// The `(package, activity)` pair identifying one screen of one app.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AppContext {
    package_name: String,
    activity_name: String,
}

impl AppContext {
    pub fn new(package: impl Into<String>, activity: impl Into<String>) -> Result<Self, UiError> {
        let package_name = package.into();
        let activity_name = activity.into();
        for (field, value) in [("package", &package_name), ("activity", &activity_name)] {
            if value.is_empty() {
                return Err(UiError::Context(format!("{field} must be non-empty")));
            }
            if value.as_bytes().contains(&DELIMITER) {
                return Err(UiError::Context(format!(
                    "{field} contains the reserved byte 0x1F"
                )));
            }
        }
        Ok(Self {
            package_name,
            activity_name,
        })
    }

    pub fn package_name(&self) -> &str {
        &self.package_name
    }

    pub fn activity_name(&self) -> &str {
        &self.activity_name
    }
}

impl fmt::Display for AppContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.package_name, self.activity_name)
    }
}

#[derive(Serialize, Deserialize)]
struct ContextRepr {
    package: String,
    activity: String,
}

impl Serialize for AppContext {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ContextRepr {
            package: self.package_name.clone(),
            activity: self.activity_name.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AppContext {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = ContextRepr::deserialize(d)?;
        AppContext::new(r.package, r.activity).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bounds {
    pub left: i32,
    pub top: i32,
    pub right: i32,
    pub bottom: i32,
}

impl Bounds {
    pub fn new(left: i32, top: i32, right: i32, bottom: i32) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    fn is_valid(&self) -> bool {
        self.left <= self.right && self.top <= self.bottom
    }

    fn horizontal_overlap(&self, other: &Bounds) -> i64 {
        i64::from(self.right.min(other.right)) - i64::from(self.left.max(other.left))
    }

    fn vertical_overlap(&self, other: &Bounds) -> i64 {
        i64::from(self.bottom.min(other.bottom)) - i64::from(self.top.max(other.top))
    }

    /// `self` lies entirely above `other` and they share at least one column.
    pub fn is_above(&self, other: &Bounds) -> bool {
        self.bottom <= other.top && self.horizontal_overlap(other) >= 1
    }

    /// `self` lies entirely left of `other` and they share at least one row.
    pub fn is_left_of(&self, other: &Bounds) -> bool {
        self.right <= other.left && self.vertical_overlap(other) >= 1
    }

    pub fn literal(&self) -> String {
        format!("{},{},{},{}", self.left, self.top, self.right, self.bottom)
    }
}

impl Serialize for Bounds {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.left, self.top, self.right, self.bottom].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Bounds {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [l, t, r, b] = <[i32; 4]>::deserialize(d)?;
        Ok(Bounds::new(l, t, r, b))
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_true(b: &bool) -> bool {
    *b
}

fn yes() -> bool {
    true
}

/// One view in the element tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UiElement {
    #[serde(rename = "id", default, skip_serializing_if = "String::is_empty")]
    pub element_id: String,
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Slot>,
    #[serde(rename = "content_desc", default, skip_serializing_if = "Option::is_none")]
    pub content_description: Option<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_id: Option<String>,
    pub bounds: Bounds,
    #[serde(default, skip_serializing_if = "is_false")]
    pub clickable: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub scrollable: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub focused: bool,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<UiElement>,
}

impl UiElement {
    /// True when any text or description in the subtree is a hidden slot.
    pub fn contains_hidden(&self) -> bool {
        self.text.as_ref().is_some_and(Slot::is_hidden)
            || self.content_description.as_ref().is_some_and(Slot::is_hidden)
            || self.children.iter().any(Self::contains_hidden)
    }

    pub fn new(class_name: impl Into<String>, bounds: Bounds) -> Self {
        Self {
            element_id: String::new(),
            class_name: class_name.into(),
            text: None,
            content_description: None,
            view_id: None,
            bounds,
            clickable: false,
            scrollable: false,
            focused: false,
            enabled: true,
            children: Vec::new(),
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(Slot::plain(text));
        self
    }

    pub fn clickable(mut self) -> Self {
        self.clickable = true;
        self
    }

    pub fn with_children(mut self, children: Vec<UiElement>) -> Self {
        self.children = children;
        self
    }

    /// Pre-order traversal.
    pub fn walk(&self) -> Vec<&UiElement> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(e) = stack.pop() {
            out.push(e);
            stack.extend(e.children.iter().rev());
        }
        out
    }

    pub fn find(&self, id: &str) -> Option<&UiElement> {
        self.walk().into_iter().find(|e| e.element_id == id)
    }

    pub fn find_mut(&mut self, id: &str) -> Option<&mut UiElement> {
        if self.element_id == id {
            return Some(self);
        }
        self.children.iter_mut().find_map(|c| c.find_mut(id))
    }

    pub fn plain_text(&self) -> Option<&str> {
        self.text.as_ref().and_then(Slot::as_plain)
    }

    pub fn plain_content_description(&self) -> Option<&str> {
        self.content_description.as_ref().and_then(Slot::as_plain)
    }
}

/// An element tree together with the screen it was captured from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Screen {
    pub context: AppContext,
    pub root: UiElement,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScreenRepr {
    package: String,
    activity: String,
    root: UiElement,
}

impl Serialize for Screen {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ScreenRepr {
            package: self.context.package_name.clone(),
            activity: self.context.activity_name.clone(),
            root: self.root.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Screen {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = ScreenRepr::deserialize(d)?;
        let context = AppContext::new(r.package, r.activity).map_err(serde::de::Error::custom)?;
        Screen::new(context, r.root).map_err(serde::de::Error::custom)
    }
}

impl Screen {
    /// Validates the tree and assigns depth-first ordinal ids (`e1`, `e2`, ...)
    /// to elements that lack one.
    pub fn new(context: AppContext, mut root: UiElement) -> Result<Self, UiError> {
        let mut counter = 0usize;
        assign_ids(&mut root, &mut counter);
        let mut seen = HashSet::new();
        validate_tree(&root, "root", &mut seen)?;
        Ok(Self { context, root })
    }

    pub fn graph(&self) -> UiSnapshotGraph {
        build_graph(&self.root, &self.context)
    }
}

fn assign_ids(e: &mut UiElement, counter: &mut usize) {
    *counter += 1;
    if e.element_id.is_empty() {
        e.element_id = format!("e{counter}");
    }
    for c in &mut e.children {
        assign_ids(c, counter);
    }
}

fn validate_tree(e: &UiElement, path: &str, seen: &mut HashSet<String>) -> Result<(), UiError> {
    if e.class_name.is_empty() {
        return Err(UiError::EmptyClass { path: path.into() });
    }
    if !e.bounds.is_valid() {
        return Err(UiError::InvalidBounds { path: path.into() });
    }
    if !seen.insert(e.element_id.clone()) {
        return Err(UiError::DuplicateId {
            id: e.element_id.clone(),
        });
    }
    for (i, c) in e.children.iter().enumerate() {
        validate_tree(c, &format!("{path}.children[{i}]"), seen)?;
    }
    Ok(())
}

/// Parses a screen file.
pub fn load_screen(document: &str) -> Result<Screen, UiError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let repr: ScreenRepr = serde_path_to_error::deserialize(de).map_err(|e| UiError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let context = AppContext::new(repr.package, repr.activity)?;
    Screen::new(context, repr.root)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Predicate {
    HasClassName,
    HasText,
    HasContentDescription,
    HasViewId,
    HasScreenLocation,
    IsClickable,
    IsScrollable,
    IsFocused,
    IsEnabled,
    HasParent,
    HasChild,
    Above,
    Below,
    Left,
    Right,
    ContainsPrice,
    ContainsDate,
}

impl Predicate {
    pub const ALL: [Predicate; 17] = [
        Predicate::HasClassName,
        Predicate::HasText,
        Predicate::HasContentDescription,
        Predicate::HasViewId,
        Predicate::HasScreenLocation,
        Predicate::IsClickable,
        Predicate::IsScrollable,
        Predicate::IsFocused,
        Predicate::IsEnabled,
        Predicate::HasParent,
        Predicate::HasChild,
        Predicate::Above,
        Predicate::Below,
        Predicate::Left,
        Predicate::Right,
        Predicate::ContainsPrice,
        Predicate::ContainsDate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::HasClassName => "HAS_CLASS_NAME",
            Predicate::HasText => "HAS_TEXT",
            Predicate::HasContentDescription => "HAS_CONTENT_DESCRIPTION",
            Predicate::HasViewId => "HAS_VIEW_ID",
            Predicate::HasScreenLocation => "HAS_SCREEN_LOCATION",
            Predicate::IsClickable => "IS_CLICKABLE",
            Predicate::IsScrollable => "IS_SCROLLABLE",
            Predicate::IsFocused => "IS_FOCUSED",
            Predicate::IsEnabled => "IS_ENABLED",
            Predicate::HasParent => "HAS_PARENT",
            Predicate::HasChild => "HAS_CHILD",
            Predicate::Above => "ABOVE",
            Predicate::Below => "BELOW",
            Predicate::Left => "LEFT",
            Predicate::Right => "RIGHT",
            Predicate::ContainsPrice => "CONTAINS_PRICE",
            Predicate::ContainsDate => "CONTAINS_DATE",
        }
    }

    /// Entity-to-entity predicates.
    pub fn is_relational(self) -> bool {
        matches!(
            self,
            Predicate::HasParent
                | Predicate::HasChild
                | Predicate::Above
                | Predicate::Below
                | Predicate::Left
                | Predicate::Right
        )
    }

    pub fn is_flag(self) -> bool {
        matches!(
            self,
            Predicate::IsClickable | Predicate::IsScrollable | Predicate::IsFocused | Predicate::IsEnabled
        )
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Object {
    Entity(String),
    Literal(String),
    Hidden(SaltedHash),
}

impl Object {
    pub fn as_literal(&self) -> Option<&str> {
        match self {
            Object::Literal(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_entity(&self) -> Option<&str> {
        match self {
            Object::Entity(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Object {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Object::Entity(e) => write!(f, "<{e}>"),
            Object::Literal(s) => write!(f, "{s:?}"),
            Object::Hidden(h) => write!(f, "#{h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: String,
    pub predicate: Predicate,
    pub object: Object,
}

impl Triple {
    fn new(subject: &str, predicate: Predicate, object: Object) -> Self {
        Self {
            subject: subject.to_owned(),
            predicate,
            object,
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(<{}>, {}, {})", self.subject, self.predicate, self.object)
    }
}

const FLAG_TRUE: &str = "true";
const FLAG_FALSE: &str = "false";

#[derive(Clone, Debug, Default)]
struct GraphIndex {
    position: HashMap<String, usize>,
    /// Per node: non-entity objects for each property predicate.
    properties: Vec<HashMap<Predicate, Vec<Object>>>,
    /// Per node: related node positions (ascending) for each relational predicate.
    relations: Vec<HashMap<Predicate, Vec<usize>>>,
}

/// Triple-store view of one screen.
#[derive(Clone, Debug)]
pub struct UiSnapshotGraph {
    context: AppContext,
    root: String,
    order: Vec<String>,
    triples: BTreeSet<Triple>,
    index: GraphIndex,
}

impl PartialEq for UiSnapshotGraph {
    fn eq(&self, other: &Self) -> bool {
        self.context == other.context
            && self.root == other.root
            && self.order == other.order
            && self.triples == other.triples
    }
}

impl Eq for UiSnapshotGraph {}

impl UiSnapshotGraph {
    fn assemble(
        context: AppContext,
        root: String,
        order: Vec<String>,
        triples: BTreeSet<Triple>,
    ) -> Self {
        let position: HashMap<String, usize> =
            order.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut properties = vec![HashMap::<Predicate, Vec<Object>>::new(); order.len()];
        let mut relations = vec![HashMap::<Predicate, Vec<usize>>::new(); order.len()];
        for t in &triples {
            let Some(&s) = position.get(&t.subject) else {
                continue;
            };
            match &t.object {
                Object::Entity(o) => {
                    if let Some(&o) = position.get(o) {
                        relations[s].entry(t.predicate).or_default().push(o);
                    }
                }
                other => properties[s].entry(t.predicate).or_default().push(other.clone()),
            }
        }
        for rel in &mut relations {
            for targets in rel.values_mut() {
                targets.sort_unstable();
            }
        }
        Self {
            context,
            root,
            order,
            triples,
            index: GraphIndex {
                position,
                properties,
                relations,
            },
        }
    }

    pub fn context(&self) -> &AppContext {
        &self.context
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    /// Entity ids in document (depth-first) order.
    pub fn nodes(&self) -> &[String] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.position.get(id).copied()
    }

    pub fn id_at(&self, pos: usize) -> &str {
        &self.order[pos]
    }

    pub fn objects(&self, pos: usize, predicate: Predicate) -> &[Object] {
        self.index.properties[pos]
            .get(&predicate)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// First plain literal of `predicate` on the node at `pos`.
    pub fn literal(&self, pos: usize, predicate: Predicate) -> Option<&str> {
        self.objects(pos, predicate).iter().find_map(Object::as_literal)
    }

    pub fn has_literal(&self, pos: usize, predicate: Predicate, value: &str) -> bool {
        self.objects(pos, predicate)
            .iter()
            .any(|o| o.as_literal() == Some(value))
    }

    pub fn flag(&self, pos: usize, predicate: Predicate) -> bool {
        self.has_literal(pos, predicate, FLAG_TRUE)
    }

    pub fn related(&self, pos: usize, predicate: Predicate) -> &[usize] {
        self.index.relations[pos]
            .get(&predicate)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn parent(&self, pos: usize) -> Option<usize> {
        self.related(pos, Predicate::HasParent).first().copied()
    }

    /// Children in document order.
    pub fn children(&self, pos: usize) -> &[usize] {
        self.related(pos, Predicate::HasChild)
    }

    pub fn class_name(&self, pos: usize) -> Option<&str> {
        self.literal(pos, Predicate::HasClassName)
    }

    /// Plain texts of the same-class siblings of `pos` (itself included), in
    /// menu order. Whitespace-only texts are skipped.
    pub fn same_class_sibling_texts(&self, pos: usize) -> Vec<String> {
        let class = self.class_name(pos);
        let siblings: Vec<usize> = match self.parent(pos) {
            Some(p) => self.children(p).to_vec(),
            None => vec![pos],
        };
        siblings
            .into_iter()
            .filter(|&s| self.class_name(s) == class)
            .filter_map(|s| self.literal(s, Predicate::HasText))
            .filter(|t| !t.trim().is_empty())
            .map(str::to_owned)
            .collect()
    }
}

fn push_slot(triples: &mut BTreeSet<Triple>, id: &str, predicate: Predicate, slot: &Option<Slot>) {
    match slot {
        Some(Slot::Plain(s)) => {
            triples.insert(Triple::new(id, predicate, Object::Literal(s.clone())));
        }
        Some(Slot::Hidden(h)) => {
            triples.insert(Triple::new(id, predicate, Object::Hidden(h.clone())));
        }
        None => {}
    }
}

fn flag_literal(b: bool) -> Object {
    Object::Literal(if b { FLAG_TRUE } else { FLAG_FALSE }.to_owned())
}

/// Converts an element tree into its snapshot graph, including semantic
/// annotations.
pub fn build_graph(root: &UiElement, context: &AppContext) -> UiSnapshotGraph {
    let mut triples = BTreeSet::new();
    let mut order = Vec::new();
    let mut stack = vec![root];
    while let Some(e) = stack.pop() {
        let id = e.element_id.as_str();
        order.push(id.to_owned());
        triples.insert(Triple::new(
            id,
            Predicate::HasClassName,
            Object::Literal(e.class_name.clone()),
        ));
        push_slot(&mut triples, id, Predicate::HasText, &e.text);
        push_slot(&mut triples, id, Predicate::HasContentDescription, &e.content_description);
        if let Some(v) = &e.view_id {
            triples.insert(Triple::new(id, Predicate::HasViewId, Object::Literal(v.clone())));
        }
        triples.insert(Triple::new(
            id,
            Predicate::HasScreenLocation,
            Object::Literal(e.bounds.literal()),
        ));
        triples.insert(Triple::new(id, Predicate::IsClickable, flag_literal(e.clickable)));
        triples.insert(Triple::new(id, Predicate::IsScrollable, flag_literal(e.scrollable)));
        triples.insert(Triple::new(id, Predicate::IsFocused, flag_literal(e.focused)));
        triples.insert(Triple::new(id, Predicate::IsEnabled, flag_literal(e.enabled)));
        for c in &e.children {
            let cid = c.element_id.as_str();
            triples.insert(Triple::new(id, Predicate::HasChild, Object::Entity(cid.to_owned())));
            triples.insert(Triple::new(cid, Predicate::HasParent, Object::Entity(id.to_owned())));
        }
        for (i, a) in e.children.iter().enumerate() {
            for b in &e.children[i + 1..] {
                add_spatial(&mut triples, a, b);
                add_spatial(&mut triples, b, a);
            }
        }
        stack.extend(e.children.iter().rev());
    }
    let graph = UiSnapshotGraph::assemble(context.clone(), root.element_id.clone(), order, triples);
    annotate_semantics(&graph)
}

fn add_spatial(triples: &mut BTreeSet<Triple>, a: &UiElement, b: &UiElement) {
    let (ai, bi) = (a.element_id.as_str(), b.element_id.as_str());
    if a.bounds.is_above(&b.bounds) {
        triples.insert(Triple::new(ai, Predicate::Above, Object::Entity(bi.to_owned())));
        triples.insert(Triple::new(bi, Predicate::Below, Object::Entity(ai.to_owned())));
    }
    if a.bounds.is_left_of(&b.bounds) {
        triples.insert(Triple::new(ai, Predicate::Left, Object::Entity(bi.to_owned())));
        triples.insert(Triple::new(bi, Predicate::Right, Object::Entity(ai.to_owned())));
    }
}

static PRICE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[$€£]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d{2})?$").unwrap()
});

static DATES: LazyLock<[Regex; 3]> = LazyLock::new(|| {
    [
        Regex::new(r"^(?:0?[1-9]|1[0-2])/(?:0?[1-9]|[12]\d|3[01])/\d{4}$").unwrap(),
        Regex::new(r"^\d{4}-(?:0[1-9]|1[0-2])-(?:0[1-9]|[12]\d|3[01])$").unwrap(),
        Regex::new(
            r"^(?:January|February|March|April|May|June|July|August|September|October|November|December) (?:[1-9]|[12]\d|3[01]), \d{4}$",
        )
        .unwrap(),
    ]
});

pub fn is_price(text: &str) -> bool {
    PRICE.is_match(text.trim())
}

pub fn is_date(text: &str) -> bool {
    let t = text.trim();
    DATES.iter().any(|r| r.is_match(t))
}

/// Adds CONTAINS_PRICE / CONTAINS_DATE triples for matching plain texts.
pub fn annotate_semantics(graph: &UiSnapshotGraph) -> UiSnapshotGraph {
    let mut triples = graph.triples.clone();
    for t in &graph.triples {
        if t.predicate != Predicate::HasText {
            continue;
        }
        let Object::Literal(text) = &t.object else {
            continue;
        };
        if is_price(text) {
            triples.insert(Triple::new(&t.subject, Predicate::ContainsPrice, t.object.clone()));
        }
        if is_date(text) {
            triples.insert(Triple::new(&t.subject, Predicate::ContainsDate, t.object.clone()));
        }
    }
    if triples.len() == graph.triples.len() {
        return graph.clone();
    }
    UiSnapshotGraph::assemble(
        graph.context.clone(),
        graph.root.clone(),
        graph.order.clone(),
        triples,
    )
}

/// An `(app context, content)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InfoEntry {
    pub context: AppContext,
    pub content: String,
}

impl InfoEntry {
    pub fn new(context: AppContext, content: impl Into<String>) -> Result<Self, UiError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(UiError::EmptyContent);
        }
        Ok(Self { context, content })
    }
}

/// Every distinct visible text and content description on the screen.
pub fn extract_entries(graph: &UiSnapshotGraph) -> BTreeSet<InfoEntry> {
    graph
        .triples
        .iter()
        .filter(|t| matches!(t.predicate, Predicate::HasText | Predicate::HasContentDescription))
        .filter_map(|t| t.object.as_literal())
        .filter_map(|s| InfoEntry::new(graph.context.clone(), s).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx() -> AppContext {
        AppContext::new("com.example", "Main").unwrap()
    }

    fn has(g: &UiSnapshotGraph, s: &str, p: Predicate, o: Object) -> bool {
        g.triples().contains(&Triple::new(s, p, o))
    }

    #[test]
    fn load_single_node() {
        let s = load_screen(
            r#"{"package":"com.example","activity":"Main",
                "root":{"class":"Button","text":"next","bounds":[0,0,10,10]}}"#,
        )
        .unwrap();
        assert_eq!(s.root.walk().len(), 1);
        assert_eq!(s.root.element_id, "e1");
        assert_eq!(s.root.plain_text(), Some("next"));
    }

    #[test]
    fn load_preserves_child_order() {
        let s = load_screen(
            r#"{"package":"p","activity":"a","root":{"class":"L","bounds":[0,0,9,9],"children":[
                {"class":"T","text":"first","bounds":[0,0,1,1]},
                {"class":"T","text":"second","bounds":[0,2,1,3]}]}}"#,
        )
        .unwrap();
        let texts: Vec<_> = s.root.children.iter().map(|c| c.plain_text().unwrap()).collect();
        assert_eq!(texts, ["first", "second"]);
        assert_eq!(s.root.walk().len(), 3);
        assert_eq!(s.root.children[1].element_id, "e3");
    }

    #[test]
    fn missing_class_names_path() {
        let err = load_screen(
            r#"{"package":"p","activity":"a","root":{"class":"L","bounds":[0,0,9,9],"children":[
                {"text":"x","bounds":[0,0,1,1]}]}}"#,
        )
        .unwrap_err();
        match err {
            UiError::Parse { path, message } => {
                assert_eq!(path, "root.children[0]");
                assert!(message.contains("class"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_explicit_ids_rejected() {
        let err = load_screen(
            r#"{"package":"p","activity":"a","root":{"id":"x","class":"L","bounds":[0,0,9,9],"children":[
                {"id":"x","class":"T","bounds":[0,0,1,1]}]}}"#,
        )
        .unwrap_err();
        assert_eq!(err, UiError::DuplicateId { id: "x".into() });
    }

    #[test]
    fn invalid_bounds_rejected() {
        let err = load_screen(
            r#"{"package":"p","activity":"a","root":{"class":"L","bounds":[5,0,1,9]}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, UiError::InvalidBounds { .. }));
    }

    #[test]
    fn context_rejects_delimiter() {
        assert!(AppContext::new("com.\u{1F}amex", "Pay").is_err());
        assert!(AppContext::new("", "Pay").is_err());
    }

    #[test]
    fn graph_property_and_hierarchy_triples() {
        let root = UiElement::new("LinearLayout", Bounds::new(0, 0, 100, 200))
            .with_children(vec![UiElement::new("TextView", Bounds::new(0, 0, 100, 50)).with_text("Hello")]);
        let s = Screen::new(ctx(), root).unwrap();
        let g = s.graph();
        assert!(has(&g, "e2", Predicate::HasText, Object::Literal("Hello".into())));
        assert!(has(&g, "e2", Predicate::HasClassName, Object::Literal("TextView".into())));
        assert!(has(&g, "e1", Predicate::HasChild, Object::Entity("e2".into())));
        assert!(has(&g, "e2", Predicate::HasParent, Object::Entity("e1".into())));
        assert!(has(&g, "e2", Predicate::HasScreenLocation, Object::Literal("0,0,100,50".into())));
    }

    #[test]
    fn sibling_spatial_relations() {
        let root = UiElement::new("L", Bounds::new(0, 0, 100, 200)).with_children(vec![
            UiElement::new("A", Bounds::new(0, 0, 100, 50)),
            UiElement::new("B", Bounds::new(0, 60, 100, 110)),
        ]);
        let g = Screen::new(ctx(), root).unwrap().graph();
        assert!(has(&g, "e2", Predicate::Above, Object::Entity("e3".into())));
        assert!(has(&g, "e3", Predicate::Below, Object::Entity("e2".into())));
        assert!(!has(&g, "e2", Predicate::Left, Object::Entity("e3".into())));
        // parent and child never get spatial triples
        assert!(!g.triples().iter().any(|t| t.subject == "e1" && t.predicate == Predicate::Above));
    }

    #[test]
    fn spatial_requires_overlap() {
        let a = Bounds::new(0, 0, 50, 50);
        let b = Bounds::new(50, 60, 100, 110);
        assert!(!a.is_above(&b), "touching columns do not overlap");
        let c = Bounds::new(49, 60, 100, 110);
        assert!(a.is_above(&c));
        assert!(Bounds::new(0, 0, 10, 10).is_left_of(&Bounds::new(10, 5, 20, 15)));
    }

    #[test]
    fn entries_are_a_set() {
        let root = UiElement::new("L", Bounds::new(0, 0, 100, 200)).with_children(vec![
            UiElement::new("T", Bounds::new(0, 0, 1, 1)).with_text("next"),
            UiElement::new("T", Bounds::new(0, 2, 1, 3)).with_text("next"),
            UiElement::new("T", Bounds::new(0, 4, 1, 5)).with_text("Good morning, Bob"),
            UiElement::new("T", Bounds::new(0, 6, 1, 7)).with_text("   "),
        ]);
        let g = Screen::new(ctx(), root).unwrap().graph();
        assert_eq!(extract_entries(&g).len(), 2);
    }

    #[test]
    fn entries_cover_content_descriptions() {
        let mut pay = UiElement::new("Button", Bounds::new(0, 0, 1, 1)).with_text("pay");
        pay.content_description = Some(Slot::plain("pay icon"));
        let g = Screen::new(ctx(), pay).unwrap().graph();
        let contents: Vec<_> = extract_entries(&g).into_iter().map(|e| e.content).collect();
        assert_eq!(contents, ["pay", "pay icon"]);
        let empty = Screen::new(ctx(), UiElement::new("FrameLayout", Bounds::new(0, 0, 1, 1))).unwrap();
        assert!(extract_entries(&empty.graph()).is_empty());
    }

    #[test]
    fn semantic_annotations() {
        let root = UiElement::new("L", Bounds::new(0, 0, 100, 200)).with_children(vec![
            UiElement::new("T", Bounds::new(0, 0, 1, 1)).with_text("$4.25"),
            UiElement::new("T", Bounds::new(0, 2, 1, 3)).with_text("01/31/2020"),
            UiElement::new("T", Bounds::new(0, 4, 1, 5)).with_text("next"),
        ]);
        let g = Screen::new(ctx(), root).unwrap().graph();
        assert!(has(&g, "e2", Predicate::ContainsPrice, Object::Literal("$4.25".into())));
        assert!(has(&g, "e3", Predicate::ContainsDate, Object::Literal("01/31/2020".into())));
        assert!(!g.triples().iter().any(|t| t.subject == "e4"
            && matches!(t.predicate, Predicate::ContainsDate | Predicate::ContainsPrice)));
    }

    #[test]
    fn price_and_date_patterns() {
        for p in ["$4.25", "€1,299.00", "£12", "1,000", "42"] {
            assert!(is_price(p), "{p}");
        }
        for p in ["$4.2", "1,00", "$", "Checking (...1234)", "4.25 USD"] {
            assert!(!is_price(p), "{p}");
        }
        for d in ["01/31/2020", "2020-01-31", "January 5, 2021"] {
            assert!(is_date(d), "{d}");
        }
        for d in ["13/01/2020", "2020-13-01", "Janvier 5, 2021"] {
            assert!(!is_date(d), "{d}");
        }
    }

    fn arb_tree(depth: u32) -> BoxedStrategy<UiElement> {
        let leaf = (
            prop::sample::select(vec!["A", "B", "C"]),
            prop::option::of(prop::sample::select(vec!["x", "y", "$1.00", "2020-01-02", " "])),
            (0i32..50, 0i32..50, 0i32..50, 0i32..50),
            any::<bool>(),
        )
            .prop_map(|(class, text, (l, t, w, h), click)| {
                let mut e = UiElement::new(class, Bounds::new(l, t, l + w, t + h));
                e.text = text.map(Slot::plain);
                e.clickable = click;
                e
            });
        leaf.prop_recursive(depth, 24, 4, |inner| {
            (inner.clone(), prop::collection::vec(inner, 0..4)).prop_map(|(mut p, kids)| {
                p.children = kids;
                p
            })
        })
        .boxed()
    }

    proptest! {
        #[test]
        fn graph_invariants(tree in arb_tree(3)) {
            let s = Screen::new(ctx(), tree).unwrap();
            let g1 = s.graph();
            let g2 = s.graph();
            prop_assert_eq!(&g1, &g2);
            prop_assert_eq!(annotate_semantics(&g1), g1.clone());

            let n = s.root.walk().len();
            let parents = g1.triples().iter().filter(|t| t.predicate == Predicate::HasParent).count();
            prop_assert_eq!(parents, n - 1);
            for t in g1.triples() {
                if t.predicate == Predicate::HasParent {
                    let back = Triple::new(t.object.as_entity().unwrap(), Predicate::HasChild,
                                           Object::Entity(t.subject.clone()));
                    prop_assert!(g1.triples().contains(&back));
                }
                if matches!(t.predicate, Predicate::Above | Predicate::Below | Predicate::Left | Predicate::Right) {
                    prop_assert_ne!(t.object.as_entity(), Some(t.subject.as_str()));
                }
            }

            // tree-walk oracle for entries
            let expected: BTreeSet<String> = s.root.walk().iter()
                .flat_map(|e| [e.plain_text(), e.plain_content_description()])
                .flatten()
                .filter(|t| !t.trim().is_empty())
                .map(str::to_owned)
                .collect();
            let got: BTreeSet<String> = extract_entries(&g1).into_iter().map(|e| e.content).collect();
            prop_assert_eq!(got, expected);
        }
    }
}
