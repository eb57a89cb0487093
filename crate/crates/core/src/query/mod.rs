//! Data-description queries: which element on a screen an operation targets.
//!
//! Textual form is an S-expression grammar:
//!
//! ```text
//! (nth 1 (conj (class "TextView") (below (text "Choose Bank account"))))
//! ```

mod parse;
mod synth;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::hashing::SaltedHash;
use crate::ui_model::{Predicate, UiSnapshotGraph};

pub use parse::parse_query;
pub use synth::{synthesize_alternative, SynthesisError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown predicate `{name}` at byte {pos}")]
    UnknownPredicate { name: String, pos: usize },
    #[error("nth index must be >= 1 (byte {pos})")]
    ZeroIndex { pos: usize },
    #[error("invalid hidden hash at byte {pos}")]
    InvalidHash { pos: usize },
    #[error("invalid query: {0}")]
    Invalid(String),
}

/// String-valued properties a query can test for equality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Property {
    Class,
    Text,
    ContentDesc,
    ViewId,
}

impl Property {
    pub fn predicate(self) -> Predicate {
        match self {
            Property::Class => Predicate::HasClassName,
            Property::Text => Predicate::HasText,
            Property::ContentDesc => Predicate::HasContentDescription,
            Property::ViewId => Predicate::HasViewId,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Property::Class => "class",
            Property::Text => "text",
            Property::ContentDesc => "content-desc",
            Property::ViewId => "view-id",
        }
    }

    /// Text and content descriptions carry screen content; class names and
    /// view ids are developer-assigned.
    pub fn carries_content(self) -> bool {
        matches!(self, Property::Text | Property::ContentDesc)
    }
}

/// Content properties that can be hidden behind a salted hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HiddenProperty {
    Text,
    ContentDesc,
}

impl HiddenProperty {
    pub fn keyword(self) -> &'static str {
        match self {
            HiddenProperty::Text => "hidden-text",
            HiddenProperty::ContentDesc => "hidden-content-desc",
        }
    }

    pub fn property(self) -> Property {
        match self {
            HiddenProperty::Text => Property::Text,
            HiddenProperty::ContentDesc => Property::ContentDesc,
        }
    }

    pub fn predicate(self) -> Predicate {
        self.property().predicate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flag {
    Clickable,
    Scrollable,
    Focused,
    Enabled,
}

impl Flag {
    pub const ALL: [Flag; 4] = [Flag::Clickable, Flag::Scrollable, Flag::Focused, Flag::Enabled];

    pub fn predicate(self) -> Predicate {
        match self {
            Flag::Clickable => Predicate::IsClickable,
            Flag::Scrollable => Predicate::IsScrollable,
            Flag::Focused => Predicate::IsFocused,
            Flag::Enabled => Predicate::IsEnabled,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Flag::Clickable => "clickable",
            Flag::Scrollable => "scrollable",
            Flag::Focused => "focused",
            Flag::Enabled => "enabled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Parent,
    Child,
    Above,
    Below,
    Left,
    Right,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Parent,
        Relation::Child,
        Relation::Above,
        Relation::Below,
        Relation::Left,
        Relation::Right,
    ];

    pub fn predicate(self) -> Predicate {
        match self {
            Relation::Parent => Predicate::HasParent,
            Relation::Child => Predicate::HasChild,
            Relation::Above => Predicate::Above,
            Relation::Below => Predicate::Below,
            Relation::Left => Predicate::Left,
            Relation::Right => Predicate::Right,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Relation::Parent => "parent",
            Relation::Child => "child",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Left => "left",
            Relation::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Query {
    /// Node has a triple `(node, property, value)`.
    Property(Property, String),
    /// Salted-hash stand-in for a hidden content string; never matches locally.
    Hidden(HiddenProperty, SaltedHash),
    Flag(Flag),
    /// All parts match; at least two parts.
    Conj(Vec<Query>),
    /// Node stands in `relation` to some node matching the inner query.
    Rel(Relation, Box<Query>),
    /// The `index`-th (1-based) match of the inner query in document order.
    Nth(u32, Box<Query>),
}

impl Query {
    pub fn class(name: impl Into<String>) -> Self {
        Query::Property(Property::Class, name.into())
    }

    pub fn text(value: impl Into<String>) -> Self {
        Query::Property(Property::Text, value.into())
    }

    pub fn view_id(value: impl Into<String>) -> Self {
        Query::Property(Property::ViewId, value.into())
    }

    pub fn rel(relation: Relation, inner: Query) -> Self {
        Query::Rel(relation, Box::new(inner))
    }

    pub fn nth(index: u32, inner: Query) -> Self {
        assert!(index >= 1, "nth index is 1-based");
        Query::Nth(index, Box::new(inner))
    }

    /// Conjunction, collapsing a single part to itself.
    pub fn all(mut parts: Vec<Query>) -> Self {
        assert!(!parts.is_empty(), "empty conjunction");
        if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Query::Conj(parts)
        }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        match self {
            Query::Conj(parts) => {
                if parts.len() < 2 {
                    return Err(QueryError::Invalid("conj needs at least two parts".into()));
                }
                parts.iter().try_for_each(Query::validate)
            }
            Query::Rel(_, inner) => inner.validate(),
            Query::Nth(k, inner) => {
                if *k == 0 {
                    return Err(QueryError::Invalid("nth index must be >= 1".into()));
                }
                inner.validate()
            }
            _ => Ok(()),
        }
    }

    fn children(&self) -> Vec<&Query> {
        match self {
            Query::Conj(parts) => parts.iter().collect(),
            Query::Rel(_, inner) | Query::Nth(_, inner) => vec![inner],
            _ => Vec::new(),
        }
    }

    fn children_mut(&mut self) -> Vec<&mut Query> {
        match self {
            Query::Conj(parts) => parts.iter_mut().collect(),
            Query::Rel(_, inner) | Query::Nth(_, inner) => vec![inner.as_mut()],
            _ => Vec::new(),
        }
    }

    pub fn at(&self, path: &[usize]) -> Option<&Query> {
        match path.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children().get(i)?.at(rest),
        }
    }

    pub fn at_mut(&mut self, path: &[usize]) -> Option<&mut Query> {
        match path.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children_mut().into_iter().nth(i)?.at_mut(rest),
        }
    }

    pub(crate) fn visit<'a>(&'a self, path: &mut Vec<usize>, f: &mut impl FnMut(&[usize], &'a Query)) {
        f(path, self);
        for (i, c) in self.children().into_iter().enumerate() {
            path.push(i);
            c.visit(path, f);
            path.pop();
        }
    }

    /// Hidden slots with their paths, in pre-order.
    pub fn hidden_refs(&self) -> Vec<(Vec<usize>, HiddenProperty, SaltedHash)> {
        let mut out = Vec::new();
        self.visit(&mut Vec::new(), &mut |path, q| {
            if let Query::Hidden(p, h) = q {
                out.push((path.to_vec(), *p, h.clone()));
            }
        });
        out
    }

    pub fn contains_hidden(&self) -> bool {
        !self.hidden_refs().is_empty()
    }

    /// Every plain literal in the query, including class names and view ids.
    pub fn literals(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit(&mut Vec::new(), &mut |_, q| {
            if let Query::Property(_, v) = q {
                out.push(v.as_str());
            }
        });
        out
    }

    /// Whether a content (text / content-description) literal appears anywhere.
    pub fn has_content_anchor(&self) -> bool {
        !string_refs(self).is_empty()
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_query(self))
    }
}

impl Serialize for Query {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&serialize_query(self))
    }
}

impl<'de> Deserialize<'de> for Query {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_query(&text).map_err(serde::de::Error::custom)
    }
}

fn write_literal(out: &mut String, s: &str) {
    out.push('"');
    for ch in s.chars() {
        if ch == '"' || ch == '\\' {
            out.push('\\');
        }
        out.push(ch);
    }
    out.push('"');
}

fn write_query(out: &mut String, q: &Query) {
    out.push('(');
    match q {
        Query::Property(p, v) => {
            out.push_str(p.keyword());
            out.push(' ');
            write_literal(out, v);
        }
        Query::Hidden(p, h) => {
            out.push_str(p.keyword());
            out.push(' ');
            write_literal(out, h.as_str());
        }
        Query::Flag(f) => out.push_str(f.keyword()),
        Query::Conj(parts) => {
            out.push_str("conj");
            for p in parts {
                out.push(' ');
                write_query(out, p);
            }
        }
        Query::Rel(r, inner) => {
            out.push_str(r.keyword());
            out.push(' ');
            write_query(out, inner);
        }
        Query::Nth(k, inner) => {
            out.push_str("nth ");
            out.push_str(&k.to_string());
            out.push(' ');
            write_query(out, inner);
        }
    }
    out.push(')');
}

/// Canonical textual form.
pub fn serialize_query(q: &Query) -> String {
    let mut out = String::new();
    write_query(&mut out, q);
    out
}

pub fn eval_positions(q: &Query, g: &UiSnapshotGraph) -> Vec<usize> {
    let all = 0..g.len();
    match q {
        Query::Property(p, v) => all.filter(|&n| g.has_literal(n, p.predicate(), v)).collect(),
        Query::Hidden(..) => Vec::new(),
        Query::Flag(f) => all.filter(|&n| g.flag(n, f.predicate())).collect(),
        Query::Conj(parts) => {
            let mut iter = parts.iter();
            let mut acc = match iter.next() {
                Some(first) => eval_positions(first, g),
                None => return Vec::new(),
            };
            for part in iter {
                if acc.is_empty() {
                    break;
                }
                let keep: HashSet<usize> = eval_positions(part, g).into_iter().collect();
                acc.retain(|n| keep.contains(n));
            }
            acc
        }
        Query::Rel(r, inner) => {
            let targets: HashSet<usize> = eval_positions(inner, g).into_iter().collect();
            if targets.is_empty() {
                return Vec::new();
            }
            all.filter(|&n| g.related(n, r.predicate()).iter().any(|m| targets.contains(m)))
                .collect()
        }
        Query::Nth(k, inner) => eval_positions(inner, g)
            .get(*k as usize - 1)
            .map(|&n| vec![n])
            .unwrap_or_default(),
    }
}

/// Matching entity ids in document order.
pub fn evaluate(q: &Query, g: &UiSnapshotGraph) -> Vec<String> {
    eval_positions(q, g)
        .into_iter()
        .map(|n| g.id_at(n).to_owned())
        .collect()
}

/// Addressable content string inside a query.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StringRef {
    pub path: Vec<usize>,
    pub property: Property,
    pub value: String,
}

/// Text and content-description literals, in pre-order.
pub fn string_refs(q: &Query) -> Vec<StringRef> {
    let mut out = Vec::new();
    q.visit(&mut Vec::new(), &mut |path, node| {
        if let Query::Property(p, v) = node {
            if p.carries_content() {
                out.push(StringRef {
                    path: path.to_vec(),
                    property: *p,
                    value: v.clone(),
                });
            }
        }
    });
    out
}
