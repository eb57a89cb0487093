//! Alternative data descriptions that avoid personal strings.
//!
//! Candidates are explored cheapest first:
//!
//! | cost | shape |
//! |------|-------|
//! | 1 | `(view-id v)` |
//! | 2 | `(class c)`, class + up to two true flags, class + own public text |
//! | 2 + d | class + relation to a public anchor nested `d` levels deep (d <= 3) |
//! | +1 | `nth` ordinal over an anchored candidate |
//! | +3 | `nth` ordinal over a candidate with no content anchor |
//!
//! Within one cost level the lexicographically smallest serialization wins.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use super::{eval_positions, serialize_query, Flag, Property, Query, Relation};
use crate::ui_model::{Predicate, UiSnapshotGraph};

const MAX_ANCHOR_DEPTH: u32 = 3;
const ANCHORED_NTH_COST: u32 = 1;
const UNANCHORED_NTH_COST: u32 = 3;
const MAX_COST: u32 = 2 + MAX_ANCHOR_DEPTH + ANCHORED_NTH_COST;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SynthesisError {
    #[error("target `{0}` is not on the screen")]
    UnknownTarget(String),
    #[error("no personal-free query uniquely identifies `{0}`")]
    NoUniqueQuery(String),
}

struct Synth<'a> {
    g: &'a UiSnapshotGraph,
    personal: &'a HashSet<String>,
    /// anchors[d][node]: queries of nesting depth d that match `node`.
    anchors: Vec<Vec<Vec<Query>>>,
}

impl<'a> Synth<'a> {
    fn usable(&self, s: &str) -> bool {
        !s.trim().is_empty() && !self.personal.iter().any(|p| s.contains(p.as_str()))
    }

    fn class_query(&self, n: usize) -> Option<Query> {
        self.g.class_name(n).map(Query::class)
    }

    fn own_content(&self, n: usize) -> Vec<Query> {
        let mut out = Vec::new();
        for (prop, pred) in [
            (Property::Text, Predicate::HasText),
            (Property::ContentDesc, Predicate::HasContentDescription),
        ] {
            for v in self.g.objects(n, pred).iter().filter_map(|o| o.as_literal()) {
                if self.usable(v) {
                    out.push(Query::Property(prop, v.to_owned()));
                }
            }
        }
        out
    }

    fn view_ids(&self, n: usize) -> Vec<Query> {
        self.g
            .objects(n, Predicate::HasViewId)
            .iter()
            .filter_map(|o| o.as_literal())
            .map(Query::view_id)
            .collect()
    }

    /// Depth-1 anchors are the node's own public content or view id; deeper
    /// anchors describe the node by its class and a relation to a shallower one.
    fn build_anchors(&mut self) {
        let n = self.g.len();
        let mut level: Vec<Vec<Query>> = (0..n)
            .map(|m| {
                let mut a = self.own_content(m);
                a.extend(self.view_ids(m));
                a
            })
            .collect();
        self.anchors = vec![Vec::new(), level.clone()];
        for _ in 2..=MAX_ANCHOR_DEPTH {
            let next: Vec<Vec<Query>> = (0..n)
                .map(|m| {
                    let Some(class) = self.class_query(m) else {
                        return Vec::new();
                    };
                    let mut out = Vec::new();
                    for r in Relation::ALL {
                        for &other in self.g.related(m, r.predicate()) {
                            for a in &level[other] {
                                out.push(Query::Conj(vec![class.clone(), Query::rel(r, a.clone())]));
                            }
                        }
                    }
                    out
                })
                .collect();
            self.anchors.push(next.clone());
            level = next;
        }
    }

    /// Base candidates for `t` bucketed by cost (before ordinals).
    fn base_candidates(&self, t: usize) -> BTreeMap<u32, Vec<Query>> {
        let mut out: BTreeMap<u32, Vec<Query>> = BTreeMap::new();
        out.entry(1).or_default().extend(self.view_ids(t));
        if let Some(class) = self.class_query(t) {
            let flags: Vec<Flag> = Flag::ALL
                .into_iter()
                .filter(|f| self.g.flag(t, f.predicate()))
                .collect();
            let tier2 = out.entry(2).or_default();
            tier2.push(class.clone());
            for (i, f) in flags.iter().enumerate() {
                tier2.push(Query::Conj(vec![class.clone(), Query::Flag(*f)]));
                for f2 in &flags[i + 1..] {
                    tier2.push(Query::Conj(vec![class.clone(), Query::Flag(*f), Query::Flag(*f2)]));
                }
            }
            for own in self.own_content(t) {
                tier2.push(Query::Conj(vec![class.clone(), own]));
            }
            for depth in 1..=MAX_ANCHOR_DEPTH {
                let bucket = out.entry(2 + depth).or_default();
                for r in Relation::ALL {
                    for &m in self.g.related(t, r.predicate()) {
                        for a in &self.anchors[depth as usize][m] {
                            bucket.push(Query::Conj(vec![class.clone(), Query::rel(r, a.clone())]));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Finds the cheapest query that matches exactly `target` on `g` without using
/// any text or content description that contains a string in `personal`.
pub fn synthesize_alternative(
    g: &UiSnapshotGraph,
    target: &str,
    personal: &HashSet<String>,
) -> Result<Query, SynthesisError> {
    let t = g
        .position(target)
        .ok_or_else(|| SynthesisError::UnknownTarget(target.to_owned()))?;
    let mut synth = Synth {
        g,
        personal,
        anchors: Vec::new(),
    };
    synth.build_anchors();
    let base = synth.base_candidates(t);

    let mut by_cost: BTreeMap<u32, BTreeMap<String, Query>> = BTreeMap::new();
    for (cost, qs) in base {
        let bucket = by_cost.entry(cost).or_default();
        for q in qs {
            bucket.entry(serialize_query(&q)).or_insert(q);
        }
    }

    for cost in 1..=MAX_COST {
        let Some(bucket) = by_cost.remove(&cost) else {
            continue;
        };
        let mut ordinals: Vec<(u32, Query)> = Vec::new();
        for (_, q) in bucket {
            let hits = eval_positions(&q, g);
            if hits == [t] {
                return Ok(q);
            }
            if let Some(idx) = hits.iter().position(|&h| h == t) {
                let extra = if q.has_content_anchor() {
                    ANCHORED_NTH_COST
                } else {
                    UNANCHORED_NTH_COST
                };
                ordinals.push((cost + extra, Query::nth(idx as u32 + 1, q)));
            }
        }
        for (c, q) in ordinals {
            if c <= MAX_COST {
                by_cost.entry(c).or_default().entry(serialize_query(&q)).or_insert(q);
            }
        }
    }
    Err(SynthesisError::NoUniqueQuery(target.to_owned()))
}
