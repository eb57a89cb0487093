//! Synthetic apps and user populations with ground-truth labels, and the
//! drivers that push them through the whole pipeline: classification
//! metrics, end-to-end share/rebuild scenarios and a salt-less dictionary
//! attack.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ingest_snapshot, Recording};
use crate::executor::{execute, AppDocument, AppScreen, ExecError, ExecOptions, Execution, SimulatedApp, Transition};
use crate::hashing::{client_hash_pair, Salt, UserId};
use crate::obfuscator::{classify, condition_fallback_context, obfuscate, ObfuscateError};
use crate::query::{evaluate, string_refs};
use crate::script::{record_from_trace, serialize_script, Block, DemoEvent, DemoTrace, OpKind, Script, ScriptError};
use crate::server::{AggregationService, Aggregator, ServerConfig, ServiceError};
use crate::slot::Slot;
use crate::ui_model::{AppContext, Bounds, Screen, UiElement};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid app spec: {0}")]
    Spec(String),
    #[error("population generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Obfuscate(#[from] ObfuscateError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("{0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// Spec format

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Public,
    Personal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    FirstName,
    FullName,
    Digits { len: usize },
    Amount { min: u32, max: u32 },
    Integer { min: u32, max: u32 },
    StreetAddress,
    City,
    Merchant,
    Store,
    Time,
    Date,
    Pick { values: Vec<String> },
}

/// A field sampled per user. PUBLIC fields may still vary (clock readings,
/// prices); PERSONAL samples are unique across the population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub label: Label,
    pub generator: Generator,
    #[serde(default = "one")]
    pub count: usize,
    /// Wraps the sample; `{}` marks where it goes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
}

fn one() -> usize {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

/// Element template. Bounds are laid out automatically: children stack
/// vertically (or side by side when `horizontal`), leaves are 48 px tall.
/// `{field}` placeholders in text resolve per user; inside a repeated node
/// instance `i` uses the field's `i`-th sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeTemplate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_desc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_id: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub clickable: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub scrollable: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub horizontal: bool,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub repeat: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeTemplate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenTemplate {
    pub activity: String,
    /// Only the first `visible_to` users ever reach this screen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_to: Option<usize>,
    pub root: NodeTemplate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskStep {
    pub screen: String,
    pub action: OpKind,
    pub target: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub menu_choice: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub steps: Vec<TaskStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAppSpec {
    pub name: String,
    pub package: String,
    #[serde(default)]
    pub seed: u64,
    pub fields: BTreeMap<String, FieldSpec>,
    pub screens: BTreeMap<String, ScreenTemplate>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    pub initial: String,
    pub task: TaskSpec,
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("placeholder pattern compiles"));

fn placeholders(template: &str) -> impl Iterator<Item = &str> {
    PLACEHOLDER.captures_iter(template).map(|c| c.get(1).expect("group 1").as_str())
}

impl NodeTemplate {
    fn walk(&self, f: &mut dyn FnMut(&NodeTemplate, usize)) {
        self.walk_inner(1, f)
    }

    fn walk_inner(&self, outer_repeat: usize, f: &mut dyn FnMut(&NodeTemplate, usize)) {
        let reps = if self.repeat > 1 { self.repeat } else { outer_repeat };
        f(self, reps);
        for c in &self.children {
            c.walk_inner(reps, f);
        }
    }
}

impl SyntheticAppSpec {
    pub fn from_json(document: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(document);
        let spec: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| HarnessError::Spec(format!("{}: {}", e.path(), e.inner())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Spec(m));
        if !self.screens.contains_key(&self.initial) {
            return err(format!("initial screen `{}` does not exist", self.initial));
        }
        for (name, f) in &self.fields {
            if f.count == 0 {
                return err(format!("field `{name}`: count must be at least 1"));
            }
            if f.format.as_ref().is_some_and(|s| !s.contains("{}")) {
                return err(format!("field `{name}`: format must contain `{{}}`"));
            }
            match &f.generator {
                Generator::Digits { len } if *len == 0 => return err(format!("field `{name}`: zero-length digits")),
                Generator::Amount { min, max } | Generator::Integer { min, max } if min > max => {
                    return err(format!("field `{name}`: min exceeds max"))
                }
                Generator::Pick { values } if values.is_empty() => return err(format!("field `{name}`: nothing to pick")),
                _ => {}
            }
        }
        for (name, s) in &self.screens {
            if s.visible_to == Some(0) {
                return err(format!("screen `{name}`: visible_to must be at least 1"));
            }
            let mut problem = None;
            s.root.walk(&mut |node, reps| {
                if node.repeat == 0 {
                    problem.get_or_insert(format!("screen `{name}`: repeat must be at least 1"));
                }
                for t in node.text.iter().chain(&node.content_desc) {
                    for field in placeholders(t) {
                        match self.fields.get(field) {
                            None => {
                                problem.get_or_insert(format!("screen `{name}`: unknown field `{field}`"));
                            }
                            Some(f) if f.count < reps => {
                                problem.get_or_insert(format!(
                                    "screen `{name}`: field `{field}` has {} samples but is repeated {reps} times",
                                    f.count
                                ));
                            }
                            _ => {}
                        }
                    }
                }
            });
            if let Some(p) = problem {
                return err(p);
            }
        }
        for t in &self.transitions {
            for s in [&t.from, &t.to] {
                if !self.screens.contains_key(s) {
                    return err(format!("transition references unknown screen `{s}`"));
                }
            }
        }
        if self.task.steps.is_empty() {
            return err("task has no steps".into());
        }
        for (i, step) in self.task.steps.iter().enumerate() {
            if !self.screens.contains_key(&step.screen) {
                return err(format!("task step {i}: unknown screen `{}`", step.screen));
            }
        }
        Ok(())
    }

    pub fn context(&self, screen: &str) -> Option<AppContext> {
        let s = self.screens.get(screen)?;
        AppContext::new(self.package.clone(), s.activity.clone()).ok()
    }

    /// Every non-content string the app itself defines: constant template
    /// text, classes, ids, activities. Personal samples must avoid all of it.
    fn vocabulary(&self) -> String {
        let mut out = vec![self.name.clone(), self.package.clone(), self.task.name.clone()];
        out.extend(self.fields.keys().cloned());
        for (name, s) in &self.screens {
            out.push(name.clone());
            out.push(s.activity.clone());
            s.root.walk(&mut |n, _| {
                out.push(n.class.clone());
                out.extend(n.id.clone());
                out.extend(n.view_id.clone());
                out.extend(n.text.clone());
                out.extend(n.content_desc.clone());
            });
        }
        for step in &self.task.steps {
            out.push(step.target.clone());
            out.extend(step.parameter.clone());
            out.extend(step.variable.clone());
        }
        out.extend(DOCUMENT_WORDS.iter().map(|s| s.to_string()));
        out.join("\n")
    }
}

/// Keys and keywords that appear in serialized scripts, requests and state.
const DOCUMENT_WORDS: &[&str] = &[
    "pinalite-script/1 pinalite-shared/1 pinalite-state/1",
    "version name blocks parameters type op if kind target_query alt_query text_arg variable_name",
    "duration_s wait_for_user app snapshot package activity root class text content_desc view_id",
    "bounds clickable scrollable focused enabled children id hidden hash true false null",
    "bound_op possible_values condition then_block else_block cmp all any left right var lit",
    "conj nth view-id content-desc hidden-text hidden-content-desc above below left right parent child",
    "user_id context_hash pair_hashes queries pair_hash format records entry context quota blocked",
    "CLICK LONG_CLICK SET_TEXT SCROLL READ_OUT EXTRACT_VALUE PAUSE LAUNCH",
];

// ---------------------------------------------------------------------------
// Sampling

const FIRST_NAMES: &[&str] = &[
    "Amara", "Bastian", "Cordelia", "Desmond", "Elowen", "Florian", "Giselle", "Horatio", "Ingrid", "Jasper",
    "Kalinda", "Leopold", "Marisol", "Nikolai", "Octavia", "Percival", "Quintessa", "Rosalind", "Sebastian",
    "Theodora", "Ulysses", "Valentina", "Wilhelmina", "Xavier", "Yolanda", "Zebulon", "Anneliese", "Bartholomew",
    "Clementine", "Dashiell", "Evangeline", "Fitzgerald", "Guinevere", "Lysander", "Magnolia", "Thaddeus",
];
const LAST_NAMES: &[&str] = &[
    "Abernathy", "Blackwood", "Castellanos", "Delacroix", "Eastwick", "Fairweather", "Grimaldi", "Hawthorne",
    "Ivanova", "Jablonski", "Kowalczyk", "Lindqvist", "Montgomery", "Nakamura", "Okonkwo", "Pemberton",
    "Quiroga", "Rasmussen", "Szczepanski", "Thistlewood", "Underhill", "Vanderberg", "Whitfield", "Yarborough",
    "Zamorano", "Achterberg", "Brightwater", "Cavendish", "Drummond", "Featherstone",
];
const STREETS: &[&str] = &[
    "Maplewood", "Juniper", "Larkspur", "Cedarbrook", "Willowmere", "Foxglove", "Hollyhock", "Briarcliff",
    "Stonebridge", "Ravenwood", "Silverleaf", "Kingfisher", "Marigold", "Thornbury", "Bramblewood", "Harrowgate",
    "Lakeshore", "Copperfield", "Wrenfield", "Ashcombe",
];
const STREET_KINDS: &[&str] = &["St", "Ave", "Blvd", "Ln", "Rd", "Ct", "Way", "Pl"];
const CITIES: &[&str] = &[
    "Ashbury", "Bellhaven", "Corrinford", "Dunmarrow", "Elderglen", "Fenwick Falls", "Glenmoor", "Harlow Bay",
    "Ironvale", "Juniper Ridge", "Kestrel Point", "Larchmont", "Millbrook", "Northwold", "Oakhurst", "Pinecrest",
    "Quarry Hill", "Redcliffe", "Stillwater", "Thornhaven", "Upton Vale", "Wexford Mills", "Yarrow Creek",
];
const MERCHANTS: &[&str] = &[
    "Greengrocer", "Hardware Depot", "Bookshop", "Pharmacy", "Fuel Stop", "Pet Supplies", "Bakery", "Cinema",
    "Fitness Club", "Garden Center", "Dry Cleaners", "Music Hall", "Noodle Bar", "Taqueria", "Florist",
];
const MONTHS: &[&str] = &["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn sample(g: &Generator, rng: &mut impl Rng) -> String {
    let pick = |list: &[&str], rng: &mut dyn RngCore| list.choose(rng).expect("non-empty word list").to_string();
    match g {
        Generator::FirstName => pick(FIRST_NAMES, rng),
        Generator::FullName => format!("{} {}", pick(FIRST_NAMES, rng), pick(LAST_NAMES, rng)),
        Generator::Digits { len } => (0..*len).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect(),
        Generator::Amount { min, max } => {
            let cents = rng.random_range(u64::from(*min) * 100..=u64::from(*max) * 100);
            format!("${}.{:02}", group_thousands(cents / 100), cents % 100)
        }
        Generator::Integer { min, max } => group_thousands(u64::from(rng.random_range(*min..=*max))),
        Generator::StreetAddress => format!(
            "{} {} {}",
            rng.random_range(10..9999),
            pick(STREETS, rng),
            pick(STREET_KINDS, rng)
        ),
        Generator::City => pick(CITIES, rng),
        Generator::Merchant => format!("{} #{}", pick(MERCHANTS, rng), rng.random_range(100..999)),
        Generator::Store => format!("{} & {}", pick(STREETS, rng), pick(STREETS, rng)),
        Generator::Time => {
            let h = rng.random_range(1..=12);
            let m = rng.random_range(0..60);
            let half = if rng.random_bool(0.5) { "AM" } else { "PM" };
            format!("{h}:{m:02} {half}")
        }
        Generator::Date => format!("{} {}", pick(MONTHS, rng), rng.random_range(1..=28)),
        Generator::Pick { values } => values.choose(rng).expect("validated non-empty").clone(),
    }
}

fn formatted(f: &FieldSpec, raw: String) -> String {
    match &f.format {
        Some(fmt) => fmt.replacen("{}", &raw, 1),
        None => raw,
    }
}

/// A planted string must not be reproducible by hex digests or identifiers.
fn distinguishable(value: &str) -> bool {
    value.chars().any(|c| !matches!(c, '0'..='9' | 'a'..='f' | '-'))
}

const MAX_RETRIES: usize = 200;

// ---------------------------------------------------------------------------
// Populations

/// One simulated user: field samples, concrete screens and ground truth.
#[derive(Clone, Debug)]
pub struct UserProfile {
    pub user_id: UserId,
    pub values: BTreeMap<String, Vec<String>>,
    pub screens: BTreeMap<String, Screen>,
    /// Ground-truth label of every `(context, content)` the user can see.
    pub labels: BTreeMap<(AppContext, String), Label>,
}

impl UserProfile {
    /// Strings whose presence anywhere outside the user's device is a leak:
    /// raw personal samples and every rendered text that embeds one.
    pub fn personal_strings(&self) -> BTreeSet<String> {
        self.labels
            .iter()
            .filter(|(_, l)| **l == Label::Personal)
            .map(|((_, c), _)| c.clone())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Population {
    pub spec: SyntheticAppSpec,
    pub users: Vec<UserProfile>,
}

impl Population {
    /// Screens user `u` actually reaches.
    pub fn visible_screens(&self, u: usize) -> impl Iterator<Item = (&String, &Screen)> {
        self.users[u]
            .screens
            .iter()
            .filter(move |(name, _)| self.spec.screens[*name].visible_to.is_none_or(|k| u < k))
    }

    pub fn personal_strings(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for u in &self.users {
            out.extend(u.personal_strings());
            for (name, vals) in &u.values {
                if self.spec.fields[name].label == Label::Personal {
                    out.extend(vals.iter().cloned());
                }
            }
        }
        out
    }

    /// The app as user `u` sees it.
    pub fn app(&self, u: usize) -> Result<SimulatedApp, HarnessError> {
        let screens = self.users[u]
            .screens
            .iter()
            .map(|(name, s)| {
                (
                    name.clone(),
                    AppScreen {
                        activity: s.context.activity_name().to_owned(),
                        root: s.root.clone(),
                    },
                )
            })
            .collect();
        Ok(SimulatedApp::new(AppDocument {
            package: self.spec.package.clone(),
            screens,
            transitions: self.spec.transitions.clone(),
            initial: self.spec.initial.clone(),
        })?)
    }

    /// User `u` demonstrating the task.
    pub fn trace(&self, u: usize) -> DemoTrace {
        let events = self
            .spec
            .task
            .steps
            .iter()
            .map(|step| {
                let mut ev = DemoEvent::on(step.action, self.users[u].screens[&step.screen].clone(), step.target.clone());
                ev.menu_choice = step.menu_choice;
                ev.parameter_name = step.parameter.clone();
                ev.variable_name = step.variable.clone();
                ev
            })
            .collect();
        DemoTrace {
            name: self.spec.task.name.clone(),
            events,
        }
    }
}

struct Instantiation<'a> {
    spec: &'a SyntheticAppSpec,
    values: &'a BTreeMap<String, Vec<String>>,
    context: AppContext,
    labels: &'a mut BTreeMap<(AppContext, String), Label>,
}

const LEAF_HEIGHT: i32 = 48;
const SCREEN_WIDTH: i32 = 1080;

impl Instantiation<'_> {
    fn resolve(&mut self, template: &str, idx: usize) -> String {
        let mut personal = false;
        let text = PLACEHOLDER
            .replace_all(template, |c: &regex::Captures<'_>| {
                let name = &c[1];
                if self.spec.fields[name].label == Label::Personal {
                    personal = true;
                }
                self.values[name][idx].clone()
            })
            .into_owned();
        if !text.trim().is_empty() {
            let label = if personal { Label::Personal } else { Label::Public };
            self.labels.insert((self.context.clone(), text.clone()), label);
        }
        text
    }

    fn node(&mut self, t: &NodeTemplate, rep: Option<usize>, idx: usize, left: i32, top: i32, width: i32) -> UiElement {
        let mut e = UiElement::new(t.class.clone(), Bounds::new(left, top, left + width, top + LEAF_HEIGHT));
        if let Some(id) = &t.id {
            e.element_id = match rep {
                Some(r) => format!("{id}_{}", r + 1),
                None => id.clone(),
            };
        }
        e.text = t.text.as_ref().map(|s| Slot::Plain(self.resolve(s, idx)));
        e.content_description = t.content_desc.as_ref().map(|s| Slot::Plain(self.resolve(s, idx)));
        e.view_id = t.view_id.clone();
        e.clickable = t.clickable;
        e.scrollable = t.scrollable;

        let instances: Vec<(&NodeTemplate, Option<usize>, usize)> = t
            .children
            .iter()
            .flat_map(|c| {
                (0..c.repeat).map(move |r| if c.repeat > 1 { (c, Some(r), r) } else { (c, None, idx) })
            })
            .collect();
        if instances.is_empty() {
            return e;
        }
        let mut bottom = top;
        if t.horizontal {
            let w = width / instances.len() as i32;
            for (j, (c, r, i)) in instances.into_iter().enumerate() {
                let child = self.node(c, r, i, left + j as i32 * w, top, w);
                bottom = bottom.max(child.bounds.bottom);
                e.children.push(child);
            }
        } else {
            for (c, r, i) in instances {
                let child = self.node(c, r, i, left, bottom, width);
                bottom = child.bounds.bottom;
                e.children.push(child);
            }
        }
        e.bounds = Bounds::new(left, top, left + width, bottom);
        e
    }
}

/// Samples `n_users` users deterministically from `seed`.
pub fn gen_population(spec: &SyntheticAppSpec, n_users: usize, seed: u64) -> Result<Population, HarnessError> {
    if n_users == 0 {
        return Err(HarnessError::Generation("n_users must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_ids: Vec<UserId> = (0..n_users).map(|_| UserId::from_u128(rng.random())).collect();
    let mut values: Vec<BTreeMap<String, Vec<String>>> = vec![BTreeMap::new(); n_users];

    // Public fields first so personal samples can steer clear of them.
    let mut vocab = spec.vocabulary();
    for (name, f) in spec.fields.iter().filter(|(_, f)| f.label == Label::Public) {
        for v in values.iter_mut() {
            let samples: Vec<String> = (0..f.count).map(|_| formatted(f, sample(&f.generator, &mut rng))).collect();
            for s in &samples {
                vocab.push('\n');
                vocab.push_str(s);
            }
            v.insert(name.clone(), samples);
        }
    }
    let mut used: BTreeSet<String> = BTreeSet::new();
    for (name, f) in spec.fields.iter().filter(|(_, f)| f.label == Label::Personal) {
        for v in values.iter_mut() {
            let mut samples = Vec::with_capacity(f.count);
            for _ in 0..f.count {
                let mut attempt = 0;
                let s = loop {
                    let s = formatted(f, sample(&f.generator, &mut rng));
                    let overlaps = used.iter().any(|u| u.contains(s.as_str()) || s.contains(u.as_str()));
                    if !overlaps && !vocab.contains(s.as_str()) && distinguishable(&s) {
                        break s;
                    }
                    attempt += 1;
                    if attempt >= MAX_RETRIES {
                        return Err(HarnessError::Generation(format!(
                            "field `{name}`: no collision-free sample after {MAX_RETRIES} attempts"
                        )));
                    }
                };
                used.insert(s.clone());
                samples.push(s);
            }
            v.insert(name.clone(), samples);
        }
    }

    let mut users = Vec::with_capacity(n_users);
    for (user_id, values) in user_ids.into_iter().zip(values) {
        let mut labels = BTreeMap::new();
        let mut screens = BTreeMap::new();
        for (name, st) in &spec.screens {
            let context = spec
                .context(name)
                .ok_or_else(|| HarnessError::Spec(format!("screen `{name}`: invalid app context")))?;
            let mut inst = Instantiation {
                spec,
                values: &values,
                context: context.clone(),
                labels: &mut labels,
            };
            let root = inst.node(&st.root, None, 0, 0, 0, SCREEN_WIDTH);
            let screen = Screen::new(context, root).map_err(|e| HarnessError::Spec(format!("screen `{name}`: {e}")))?;
            screens.insert(name.clone(), screen);
        }
        for (i, step) in spec.task.steps.iter().enumerate() {
            if step.action.targets_element() && screens[&step.screen].root.find(&step.target).is_none() {
                return Err(HarnessError::Spec(format!(
                    "task step {i}: `{}` is not on screen `{}`",
                    step.target, step.screen
                )));
            }
        }
        users.push(UserProfile {
            user_id,
            values,
            screens,
            labels,
        });
    }
    Ok(Population {
        spec: spec.clone(),
        users,
    })
}

/// Uploads every screen each user reaches.
pub fn ingest_population(service: &dyn AggregationService, pop: &Population, users: usize) -> Result<(), HarnessError> {
    for u in 0..users.min(pop.users.len()) {
        for (_, screen) in pop.visible_screens(u) {
            ingest_snapshot(service, &pop.users[u].user_id, &screen.graph())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub entry_id: usize,
    pub context: String,
    pub content: String,
    pub truth: Label,
    pub classified: Label,
    pub f: u64,
    pub g: u64,
    pub p_value: f64,
}

/// Positive means "classified personal". Precision with no positives and
/// recall with no personal entries are reported as 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub app: String,
    pub n: usize,
    pub n_personal: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub table: Vec<EvalRow>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalResult {
    fn from_rows(app: String, table: Vec<EvalRow>) -> Self {
        let count = |truth, classified| table.iter().filter(|r| r.truth == truth && r.classified == classified).count();
        let tp = count(Label::Personal, Label::Personal);
        let fp = count(Label::Public, Label::Personal);
        let tn = count(Label::Public, Label::Public);
        let fneg = count(Label::Personal, Label::Public);
        let n = table.len();
        Self {
            app,
            n,
            n_personal: tp + fneg,
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fneg,
            recall: ratio(tp, tp + fneg),
            precision: ratio(tp, tp + fp),
            accuracy: ratio(tp + tn, n),
            table,
        }
    }
}

/// Fresh server, `n_users` users ingest everything they see, user 1 records
/// the task, and every entry of the recording is classified and compared
/// with ground truth.
pub fn run_eval(spec: &SyntheticAppSpec, n_users: usize, t: f64) -> Result<EvalResult, HarnessError> {
    let pop = gen_population(spec, n_users, spec.seed)?;
    let mut config = ServerConfig::new("unused-state.jsonl");
    config.t = t;
    let salt = seeded_salt(spec.seed);
    let agg = Aggregator::new(config, salt).map_err(|e| HarnessError::Io(e.to_string()))?;
    ingest_population(&agg, &pop, n_users)?;
    let author = &pop.users[0];
    let script = record_from_trace(&pop.trace(0))?;
    let report = classify(&script, &agg, &author.user_id)?;
    let mut rows = Vec::with_capacity(report.entries.len());
    for e in &report.entries {
        let truth = *author
            .labels
            .get(&(e.context.clone(), e.content.clone()))
            .ok_or_else(|| HarnessError::Spec(format!("entry `{}` on {} has no ground truth", e.content, e.context)))?;
        rows.push(EvalRow {
            entry_id: e.entry_id,
            context: e.context.to_string(),
            content: e.content.clone(),
            truth,
            classified: if e.verdict.public { Label::Public } else { Label::Personal },
            f: e.verdict.f,
            g: e.verdict.g,
            p_value: e.verdict.p_value,
        });
    }
    Ok(EvalResult::from_rows(spec.name.clone(), rows))
}

/// Deterministic server salt for reproducible simulations.
pub fn seeded_salt(seed: u64) -> Salt {
    let mut bytes = [0u8; 64];
    ChaCha8Rng::seed_from_u64(seed ^ 0x5a17_5a17).fill_bytes(&mut bytes);
    Salt::from_bytes(&bytes).expect("64 bytes is a valid salt")
}

/// Text table with one row per app.
pub fn render_table(results: &[EvalResult]) -> String {
    let width = results.iter().map(|r| r.app.len()).max().unwrap_or(3).max(3);
    let mut out = format!(
        "{:<width$}  {:>4}  {:>10}  {:>6}  {:>9}  {:>8}\n",
        "app", "n", "n_personal", "recall", "precision", "accuracy"
    );
    for r in results {
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>10}  {:>6.3}  {:>9.3}  {:>8.3}",
            r.app, r.n, r.n_personal, r.recall, r.precision, r.accuracy
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Dictionary attack

/// Every salted hash carried by hidden slots of `s`.
pub fn hidden_hashes(s: &Script) -> BTreeSet<String> {
    fn element(e: &UiElement, out: &mut BTreeSet<String>) {
        for slot in e.text.iter().chain(&e.content_description) {
            if let Slot::Hidden(h) = slot {
                out.insert(h.as_str().to_owned());
            }
        }
        for c in &e.children {
            element(c, out);
        }
    }
    let mut out = BTreeSet::new();
    for (_, b) in s.indexed_blocks() {
        match b {
            Block::Op(op) => {
                for q in op.target_query.iter().chain(&op.alt_query) {
                    out.extend(q.hidden_refs().into_iter().map(|(_, _, h)| h.as_str().to_owned()));
                }
                if let Some(Slot::Hidden(h)) = &op.text_arg {
                    out.insert(h.as_str().to_owned());
                }
                if let Some(snap) = &op.snapshot {
                    element(&snap.root, &mut out);
                }
            }
            Block::If(c) => {
                for (_, slot) in c.condition.literals() {
                    if let Slot::Hidden(h) = slot {
                        out.insert(h.as_str().to_owned());
                    }
                }
            }
        }
    }
    for p in &s.parameters {
        for v in &p.possible_values {
            if let Slot::Hidden(h) = v {
                out.insert(h.as_str().to_owned());
            }
        }
    }
    out
}

/// An attacker without the salt hashes every candidate under every context
/// the script mentions and looks for equal digests. Returns the match count.
pub fn dictionary_attack_sim(shared: &Script, candidate_pool: &[String]) -> usize {
    let targets = hidden_hashes(shared);
    if targets.is_empty() || candidate_pool.is_empty() {
        return 0;
    }
    let mut contexts: BTreeSet<AppContext> = shared
        .operations()
        .into_iter()
        .filter_map(|(_, op)| op.snapshot.as_ref().map(|s| s.context.clone()))
        .collect();
    contexts.insert(condition_fallback_context());
    let mut matches = 0;
    for candidate in candidate_pool {
        for ctx in &contexts {
            if let Ok(h) = client_hash_pair(ctx, candidate) {
                if targets.contains(h.as_str()) {
                    matches += 1;
                }
            }
        }
    }
    matches
}

/// `size` distinct candidates: every personal string of the population plus
/// fresh draws from the app's own personal generators.
pub fn candidate_pool(pop: &Population, size: usize, seed: u64) -> Vec<String> {
    let mut pool: BTreeSet<String> = pop.personal_strings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gens: Vec<&FieldSpec> = pop.spec.fields.values().filter(|f| f.label == Label::Personal).collect();
    let mut draws = 0usize;
    while pool.len() < size && !gens.is_empty() && draws < size * 50 {
        let f = gens[draws % gens.len()];
        pool.insert(formatted(f, sample(&f.generator, &mut rng)));
        draws += 1;
    }
    let mut filler = 0usize;
    while pool.len() < size {
        pool.insert(format!("{} {}", sample(&Generator::City, &mut rng), filler));
        filler += 1;
    }
    pool.into_iter().collect()
}

// ---------------------------------------------------------------------------
// End-to-end scenarios

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one scenario together with every artifact it produced, so
/// failures can be inspected and scans repeated independently.
#[derive(Debug)]
pub struct ScenarioReport {
    pub scenario: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub population: Population,
    pub author_script: Script,
    pub shared: Script,
    pub shared_json: String,
    pub payloads: Vec<String>,
    pub state_file: String,
    pub execution: Execution,
    pub reexecution: Option<Execution>,
}

impl ScenarioReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}: {}", self.scenario, if self.passed { "pass" } else { "FAIL" })?;
        for c in &self.checks {
            writeln!(f, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Size of the dictionary used by [`e2e_scenario`].
pub const ATTACK_POOL_SIZE: usize = 10_000;
/// Users who ingest before the author shares; one more user is the consumer.
pub const SCENARIO_USERS: usize = 5;

fn found_in(haystack: &str, needles: &BTreeSet<String>) -> Vec<String> {
    needles.iter().filter(|n| haystack.contains(n.as_str())).cloned().collect()
}

fn leak_check(name: &str, haystack: &str, needles: &BTreeSet<String>) -> Check {
    let hits = found_in(haystack, needles);
    Check {
        name: name.into(),
        passed: hits.is_empty(),
        detail: if hits.is_empty() {
            format!("0 of {} planted strings found", needles.len())
        } else {
            format!("found {hits:?}")
        },
    }
}

fn parent_of<'a>(root: &'a UiElement, id: &str) -> Option<&'a UiElement> {
    if root.children.iter().any(|c| c.element_id == id) {
        return Some(root);
    }
    root.children.iter().find_map(|c| parent_of(c, id))
}

/// Texts of the same-class siblings of `id`, read straight off the tree.
fn menu_texts(root: &UiElement, id: &str) -> Vec<String> {
    let Some(target) = root.find(id) else {
        return Vec::new();
    };
    match parent_of(root, id) {
        Some(p) => p
            .children
            .iter()
            .filter(|c| c.class_name == target.class_name)
            .filter_map(|c| c.plain_text())
            .filter(|t| !t.trim().is_empty())
            .map(str::to_owned)
            .collect(),
        None => target.plain_text().map(|t| vec![t.to_owned()]).unwrap_or_default(),
    }
}

/// Author records and shares, a consumer with different data rebuilds and
/// runs the shared script, and every artifact is scanned for leaks.
pub fn e2e_scenario(spec: &SyntheticAppSpec, seed: u64) -> Result<ScenarioReport, HarnessError> {
    let pop = gen_population(spec, SCENARIO_USERS + 1, seed)?;
    let consumer = SCENARIO_USERS;
    let dir = tempfile::tempdir().map_err(|e| HarnessError::Io(e.to_string()))?;
    let state_path = dir.path().join("state.jsonl");
    let agg = Aggregator::new(ServerConfig::new(&state_path), seeded_salt(seed)).map_err(|e| HarnessError::Io(e.to_string()))?;
    let wire = Recording::new(&agg);
    ingest_population(&wire, &pop, SCENARIO_USERS)?;

    let author = &pop.users[0];
    let author_script = record_from_trace(&pop.trace(0))?;
    let report = classify(&author_script, &wire, &author.user_id)?;
    let shared_out = obfuscate(&author_script, &report)?;
    let shared = shared_out.script;
    let shared_json = serialize_script(&shared);
    agg.persist().map_err(|e| HarnessError::Io(e.to_string()))?;
    let state_file = std::fs::read_to_string(&state_path).map_err(|e| HarnessError::Io(e.to_string()))?;
    let payloads = wire.payloads();

    let author_personal: BTreeSet<String> = {
        let mut s = author.personal_strings();
        for (name, vals) in &author.values {
            if spec.fields[name].label == Label::Personal {
                s.extend(vals.iter().cloned());
            }
        }
        s
    };
    let everyone = pop.personal_strings();
    let mut checks = vec![
        leak_check("shared_script_leak_free", &shared_json, &author_personal),
        leak_check("payloads_leak_free", &payloads.join("\n"), &everyone),
        leak_check("state_file_leak_free", &state_file, &everyone),
    ];

    let pool = candidate_pool(&pop, ATTACK_POOL_SIZE, seed.wrapping_add(1));
    let hits = dictionary_attack_sim(&shared, &pool);
    checks.push(Check {
        name: "dictionary_attack".into(),
        passed: hits == 0,
        detail: format!("{hits} matches from {} candidates", pool.len()),
    });

    let mut alt_problems = Vec::new();
    for (idx, op) in author_script.operations() {
        if !op.kind.targets_element() {
            continue;
        }
        let (Some(q), Some(snap)) = (&op.target_query, &op.snapshot) else {
            continue;
        };
        let g = snap.graph();
        let target = evaluate(q, &g);
        match shared.operation(idx).and_then(|o| o.alt_query.as_ref()) {
            None => alt_problems.push(format!("block {idx}: no alternative description")),
            Some(alt) => {
                if evaluate(alt, &g) != target {
                    alt_problems.push(format!("block {idx}: {alt} does not single out {target:?}"));
                }
                for r in string_refs(alt) {
                    if author_personal.iter().any(|p| r.value.contains(p.as_str())) {
                        alt_problems.push(format!("block {idx}: {alt} references personal `{}`", r.value));
                    }
                }
            }
        }
    }
    checks.push(Check {
        name: "alt_queries_unique_and_public".into(),
        passed: alt_problems.is_empty(),
        detail: if alt_problems.is_empty() {
            "every element operation has a unique public alternative".into()
        } else {
            alt_problems.join("; ")
        },
    });

    let app = pop.app(consumer)?;
    let execution = execute(&shared, &app, &ExecOptions::default())?;
    checks.push(Check {
        name: "consumer_execution".into(),
        passed: execution.success,
        detail: if execution.success {
            format!("{} events", execution.trace.events.len())
        } else {
            format!("failed: {}", execution.trace.to_json_lines())
        },
    });

    let mut param_problems = Vec::new();
    for p in &execution.rebuilt.parameters {
        let ev = execution.trace.events.iter().find(|e| e.op_index == p.bound_op && e.matched.is_some());
        let Some(ev) = ev else {
            param_problems.push(format!("`{}`: bound operation never ran", p.name));
            continue;
        };
        let screen = &pop.users[consumer].screens[&ev.screen];
        let want = menu_texts(&screen.root, ev.matched.as_deref().expect("filtered"));
        let got: Vec<String> = p.possible_values.iter().map(|v| v.as_plain().unwrap_or("<hidden>").to_owned()).collect();
        if got != want {
            param_problems.push(format!("`{}`: got {got:?}, consumer menu {want:?}", p.name));
        }
    }
    checks.push(Check {
        name: "parameters_match_consumer_menu".into(),
        passed: param_problems.is_empty(),
        detail: if param_problems.is_empty() {
            format!("{} parameters", execution.rebuilt.parameters.len())
        } else {
            param_problems.join("; ")
        },
    });

    let consumer_texts: BTreeSet<&str> = pop.users[consumer]
        .labels
        .keys()
        .map(|(_, c)| c.as_str())
        .collect();
    let rebuilds: Vec<&str> = execution
        .trace
        .events
        .iter()
        .flat_map(|e| e.rebuilt.iter().map(|r| r.new_plaintext.as_str()))
        .collect();
    let foreign: Vec<&str> = rebuilds.iter().copied().filter(|r| !consumer_texts.contains(r)).collect();
    let rebuilt_json = serialize_script(&execution.rebuilt);
    let author_in_rebuilt = found_in(&rebuilt_json, &author_personal);
    checks.push(Check {
        name: "rebuilt_from_consumer".into(),
        passed: foreign.is_empty() && author_in_rebuilt.is_empty() && !execution.rebuilt.contains_hidden(),
        detail: format!(
            "{} slots rebuilt; not on consumer screens: {foreign:?}; author strings in rebuilt script: {author_in_rebuilt:?}; hidden slots left: {}",
            rebuilds.len(),
            execution.rebuilt.contains_hidden()
        ),
    });

    let reexecution = if execution.success {
        Some(execute(&execution.rebuilt, &app, &ExecOptions::default())?)
    } else {
        None
    };
    let (ok, detail) = match &reexecution {
        Some(r) => {
            let alt_used = r.trace.events.iter().filter(|e| e.used_alt_query).count();
            (
                r.success && alt_used == 0,
                format!("success={}, alternative descriptions used {alt_used} times", r.success),
            )
        }
        None => (false, "first execution failed".into()),
    };
    checks.push(Check {
        name: "re_execution_without_alt".into(),
        passed: ok,
        detail,
    });

    Ok(ScenarioReport {
        scenario: spec.name.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
        population: pop,
        author_script,
        shared,
        shared_json,
        payloads,
        state_file,
        execution,
        reexecution,
    })
}

// ---------------------------------------------------------------------------
// Bundled apps

const BANKING: &str = include_str!("../specs/banking.json");
const COFFEE: &str = include_str!("../specs/coffee.json");
const RIDE_HAILING: &str = include_str!("../specs/ride_hailing.json");
const ADVERSARIAL: &str = include_str!("../specs/adversarial.json");
const CONDITIONAL: &str = include_str!("../specs/conditional.json");

fn bundled(doc: &str) -> SyntheticAppSpec {
    SyntheticAppSpec::from_json(doc).expect("bundled spec is valid")
}

/// Banking, coffee ordering and ride hailing.
pub fn bundled_specs() -> Vec<SyntheticAppSpec> {
    [BANKING, COFFEE, RIDE_HAILING].into_iter().map(bundled).collect()
}

/// Accounts with public-looking nicknames that only their owner has.
pub fn adversarial_spec() -> SyntheticAppSpec {
    bundled(ADVERSARIAL)
}

/// A constant banner on a screen that only 4 of 5 users reach.
pub fn conditional_spec() -> SyntheticAppSpec {
    bundled(CONDITIONAL)
}

/// Looks a bundled spec up by name or file stem.
pub fn bundled_spec(name: &str) -> Option<SyntheticAppSpec> {
    let all = [
        ("banking", BANKING),
        ("coffee", COFFEE),
        ("ride_hailing", RIDE_HAILING),
        ("adversarial", ADVERSARIAL),
        ("conditional", CONDITIONAL),
    ];
    all.into_iter()
        .map(|(stem, doc)| (stem, bundled(doc)))
        .find(|(stem, s)| *stem == name || s.name == name)
        .map(|(_, s)| s)
}
