//! Aggregation service: unique-user counts over salted hashes, the exact
//! uniqueness test, quotas and persistence.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{salted_hash, ClientHash, HashError, Salt, SaltedHash, UserId};

pub const WINDOW_SECS: u64 = 24 * 60 * 60;
pub const BLOCK_FACTOR: u64 = 3;
pub const SALT_FILE_ENV: &str = "PINALITE_SALT_FILE";
const STATE_FORMAT: &str = "pinalite-state/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("quota exceeded; retry after {retry_after_s}s")]
    QuotaExceeded { retry_after_s: u64 },
    #[error("client is blocked")]
    Blocked,
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state file {path}: {message}")]
    State { path: PathBuf, message: String },
    #[error(transparent)]
    Hash(#[from] HashError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid binomial tail arguments: F={f}, G={g}, t={t}")]
pub struct BinomialError {
    pub f: u64,
    pub g: u64,
    pub t: String,
}

/// `P(X >= f)` for `X ~ Binomial(g, t)`. Small `g` sums in linear space,
/// large `g` in log space.
pub fn exact_binomial_tail(f: u64, g: u64, t: f64) -> Result<f64, BinomialError> {
    if f > g || !(t > 0.0 && t < 1.0) {
        return Err(BinomialError { f, g, t: t.to_string() });
    }
    if f == 0 {
        return Ok(1.0);
    }
    let q = 1.0 - t;
    if (g as f64) * t.min(q).ln().abs() < 600.0 {
        // No underflow possible: sum downward from pmf(g) = t^g.
        let mut pmf = t.powi(g as i32);
        let mut sum = pmf;
        for k in (f + 1..=g).rev() {
            pmf *= k as f64 / (g - k + 1) as f64 * (q / t);
            sum += pmf;
        }
        return Ok(sum.clamp(0.0, 1.0));
    }
    let (ln_t, ln_q) = (t.ln(), (-t).ln_1p());
    // log C(g, f) built incrementally, then the pmf ratio recurrence upward.
    let mut ln_c = 0.0;
    for i in 0..f {
        ln_c += ((g - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    let mut terms = Vec::with_capacity((g - f + 1) as usize);
    let mut ln_pmf = ln_c + f as f64 * ln_t + (g - f) as f64 * ln_q;
    terms.push(ln_pmf);
    for k in f..g {
        ln_pmf += ((g - k) as f64).ln() - ((k + 1) as f64).ln() + ln_t - ln_q;
        terms.push(ln_pmf);
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|x| (x - max).exp()).sum();
    Ok((max + sum.ln()).exp().clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessVerdict {
    pub f: u64,
    pub g: u64,
    pub p_value: f64,
    pub public: bool,
}

impl UniquenessVerdict {
    pub fn compute(f: u64, g: u64, t: f64, alpha: f64) -> Self {
        if g == 0 {
            return Self {
                f: 0,
                g: 0,
                p_value: 1.0,
                public: false,
            };
        }
        let f = f.min(g);
        let p_value = exact_binomial_tail(f, g, t).expect("f <= g and t validated by config");
        Self {
            f,
            g,
            p_value,
            public: p_value < alpha,
        }
    }

    /// Observed frequency `F / G`, undefined when nobody saw the context.
    pub fn h(&self) -> Option<f64> {
        (self.g > 0).then(|| self.f as f64 / self.g as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_entry_quota")]
    pub quota_entries_per_day: u64,
    #[serde(default = "default_query_quota")]
    pub quota_queries_per_day: u64,
    pub persistence_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt_file: Option<PathBuf>,
}

fn default_t() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    0.05
}
fn default_entry_quota() -> u64 {
    10_000
}
fn default_query_quota() -> u64 {
    1_000
}

impl ServerConfig {
    pub fn new(persistence_path: impl Into<PathBuf>) -> Self {
        Self {
            t: default_t(),
            alpha: default_alpha(),
            quota_entries_per_day: default_entry_quota(),
            quota_queries_per_day: default_query_quota(),
            persistence_path: persistence_path.into(),
            salt_file: None,
        }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.t) {
            return Err(ServerError::Config(format!("t must be in (0,1), got {}", self.t)));
        }
        if !open_unit(self.alpha) {
            return Err(ServerError::Config(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.quota_entries_per_day == 0 || self.quota_queries_per_day == 0 {
            return Err(ServerError::Config("quotas must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ServerError> {
        let c: Self = toml::from_str(text).map_err(|e| ServerError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = fs::read_to_string(path).map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            if c.persistence_path.is_relative() {
                c.persistence_path = dir.join(&c.persistence_path);
            }
            if let Some(s) = c.salt_file.as_mut().filter(|s| s.is_relative()) {
                *s = dir.join(&*s);
            }
        }
        Ok(c)
    }

    /// `PINALITE_SALT_FILE`, then `salt_file`, then `salt.key` beside the state file.
    pub fn salt_path(&self) -> PathBuf {
        if let Some(p) = std::env::var_os(SALT_FILE_ENV).filter(|p| !p.is_empty()) {
            return PathBuf::from(p);
        }
        if let Some(p) = &self.salt_file {
            return p.clone();
        }
        self.persistence_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("salt.key")
    }
}

pub trait Clock: Send + Sync {
    fn now_secs(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_secs(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }
}

/// Settable clock for tests and simulations.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        Self(AtomicU64::new(start))
    }
    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_secs(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Ingest,
    Uniqueness,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Reject { retry_after_s: u64 },
    Block,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Window {
    /// (timestamp, units) for every attempt, including rejected ones.
    events: VecDeque<(u64, u64)>,
}

impl Window {
    fn prune(&mut self, now: u64) {
        while self.events.front().is_some_and(|(ts, _)| ts + WINDOW_SECS <= now) {
            self.events.pop_front();
        }
    }

    fn total(&self) -> u64 {
        self.events.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Quota {
    entries: Window,
    queries: Window,
}

#[derive(Default, Debug, PartialEq, Eq)]
struct State {
    contexts: HashMap<SaltedHash, BTreeSet<UserId>>,
    entries: HashMap<SaltedHash, BTreeSet<UserId>>,
    quotas: HashMap<UserId, Quota>,
    blocked: BTreeSet<UserId>,
}

// ---------------------------------------------------------------------------
// Wire types

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub user_id: UserId,
    pub context_hash: ClientHash,
    pub pair_hashes: Vec<ClientHash>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub new: u64,
    pub duplicate: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniquenessQuery {
    pub context_hash: ClientHash,
    pub pair_hash: ClientHash,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniquenessRequest {
    pub user_id: UserId,
    pub queries: Vec<UniquenessQuery>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessResult {
    pub salted_pair_hash: SaltedHash,
    #[serde(flatten)]
    pub verdict: UniquenessVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessResponse {
    pub results: Vec<UniquenessResult>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub entries: u64,
    pub contexts: u64,
}

/// Anything that answers ingest and uniqueness requests: the in-process
/// aggregator, an HTTP client, or a wrapper around either.
pub trait AggregationService {
    fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ServiceError>;
    fn uniqueness(&self, req: &UniquenessRequest) -> Result<UniquenessResponse, ServiceError>;
}

impl<T: AggregationService + ?Sized> AggregationService for &T {
    fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ServiceError> {
        (**self).ingest(req)
    }
    fn uniqueness(&self, req: &UniquenessRequest) -> Result<UniquenessResponse, ServiceError> {
        (**self).uniqueness(req)
    }
}

impl<T: AggregationService + ?Sized> AggregationService for Arc<T> {
    fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ServiceError> {
        (**self).ingest(req)
    }
    fn uniqueness(&self, req: &UniquenessRequest) -> Result<UniquenessResponse, ServiceError> {
        (**self).uniqueness(req)
    }
}

// ---------------------------------------------------------------------------
// State file records

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Header { format: String },
    Context { salted_hash: SaltedHash, users: Vec<UserId> },
    Entry { salted_hash: SaltedHash, users: Vec<UserId> },
    Quota { user: UserId, entries: Vec<(u64, u64)>, queries: Vec<(u64, u64)> },
    Blocked { user: UserId },
    End { records: u64 },
}

pub struct Aggregator {
    config: ServerConfig,
    salt: Salt,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    persist_lock: Mutex<()>,
}

impl Aggregator {
    /// Fresh, empty state.
    pub fn new(config: ServerConfig, salt: Salt) -> Result<Self, ServerError> {
        Self::with_clock(config, salt, Arc::new(SystemClock))
    }

    pub fn with_clock(config: ServerConfig, salt: Salt, clock: Arc<dyn Clock>) -> Result<Self, ServerError> {
        config.validate()?;
        Ok(Self {
            config,
            salt,
            clock,
            state: Mutex::new(State::default()),
            persist_lock: Mutex::new(()),
        })
    }

    /// Loads the salt (creating it if absent) and restores persisted state.
    pub fn open(config: ServerConfig) -> Result<Self, ServerError> {
        let salt = Salt::load_or_create(&config.salt_path())?;
        let agg = Self::new(config, salt)?;
        agg.restore()?;
        Ok(agg)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn salt_hash(&self, h: &ClientHash) -> SaltedHash {
        salted_hash(h, &self.salt)
    }

    fn quota_for(&self, kind: RequestKind) -> u64 {
        match kind {
            RequestKind::Ingest => self.config.quota_entries_per_day,
            RequestKind::Uniqueness => self.config.quota_queries_per_day,
        }
    }

    fn check_locked(&self, st: &mut State, user: &UserId, kind: RequestKind, units: u64) -> Decision {
        if st.blocked.contains(user) {
            return Decision::Block;
        }
        let now = self.clock.now_secs();
        let quota = self.quota_for(kind);
        let q = st.quotas.entry(user.clone()).or_default();
        let w = match kind {
            RequestKind::Ingest => &mut q.entries,
            RequestKind::Uniqueness => &mut q.queries,
        };
        w.prune(now);
        w.events.push_back((now, units));
        let total = w.total();
        if total > BLOCK_FACTOR * quota {
            tracing::warn!(user = %user, ?kind, total, "blocking client");
            st.blocked.insert(user.clone());
            Decision::Block
        } else if total > quota {
            let oldest = w.events.front().map(|(ts, _)| *ts).unwrap_or(now);
            Decision::Reject {
                retry_after_s: (oldest + WINDOW_SECS).saturating_sub(now).max(1),
            }
        } else {
            Decision::Allow
        }
    }

    /// Records `units` attempted items for `user` and decides. Rejected
    /// attempts still count toward the block threshold.
    pub fn anomaly_check(&self, user: &UserId, kind: RequestKind, units: u64) -> Decision {
        let mut st = self.state.lock();
        self.check_locked(&mut st, user, kind, units)
    }

    pub fn is_blocked(&self, user: &UserId) -> bool {
        self.state.lock().blocked.contains(user)
    }

    fn gate(&self, st: &mut State, user: &UserId, kind: RequestKind, units: u64) -> Result<(), ServiceError> {
        match self.check_locked(st, user, kind, units) {
            Decision::Allow => Ok(()),
            Decision::Reject { retry_after_s } => Err(ServiceError::QuotaExceeded { retry_after_s }),
            Decision::Block => Err(ServiceError::Blocked),
        }
    }

    /// Current verdict for an already-salted pair/context.
    pub fn verdict_salted(&self, context: &SaltedHash, pair: &SaltedHash) -> UniquenessVerdict {
        let st = self.state.lock();
        self.verdict_locked(&st, context, pair)
    }

    fn verdict_locked(&self, st: &State, context: &SaltedHash, pair: &SaltedHash) -> UniquenessVerdict {
        let g = st.contexts.get(context).map_or(0, |s| s.len() as u64);
        let f = st.entries.get(pair).map_or(0, |s| s.len() as u64);
        UniquenessVerdict::compute(f, g, self.config.t, self.config.alpha)
    }

    pub fn health(&self) -> HealthResponse {
        let st = self.state.lock();
        HealthResponse {
            status: "ok".into(),
            entries: st.entries.len() as u64,
            contexts: st.contexts.len() as u64,
        }
    }

    /// Writes a consistent snapshot: temp file in the same directory, fsync, rename.
    pub fn persist(&self) -> Result<(), ServerError> {
        let _guard = self.persist_lock.lock();
        let path = &self.config.persistence_path;
        let err = |message: String| ServerError::State {
            path: path.clone(),
            message,
        };
        let mut lines = Vec::new();
        {
            let st = self.state.lock();
            let push = |lines: &mut Vec<String>, r: &Record| {
                lines.push(serde_json::to_string(r).expect("records serialize"));
            };
            push(&mut lines, &Record::Header {
                format: STATE_FORMAT.into(),
            });
            let sorted = |m: &HashMap<SaltedHash, BTreeSet<UserId>>| {
                m.iter()
                    .map(|(h, u)| (h.clone(), u.iter().cloned().collect::<Vec<_>>()))
                    .collect::<BTreeMap<_, _>>()
            };
            for (salted_hash, users) in sorted(&st.contexts) {
                push(&mut lines, &Record::Context { salted_hash, users });
            }
            for (salted_hash, users) in sorted(&st.entries) {
                push(&mut lines, &Record::Entry { salted_hash, users });
            }
            let quotas: BTreeMap<_, _> = st.quotas.iter().collect();
            for (user, q) in quotas {
                push(&mut lines, &Record::Quota {
                    user: user.clone(),
                    entries: q.entries.events.iter().copied().collect(),
                    queries: q.queries.events.iter().copied().collect(),
                });
            }
            for user in &st.blocked {
                push(&mut lines, &Record::Blocked { user: user.clone() });
            }
        }
        let n = lines.len() as u64;
        lines.push(serde_json::to_string(&Record::End { records: n }).expect("records serialize"));

        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = dir.join(format!(".{file_name}.tmp"));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            for l in &lines {
                f.write_all(l.as_bytes())?;
                f.write_all(b"\n")?;
            }
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| err(e.to_string()))?;
        tracing::debug!(path = %path.display(), records = n, "state persisted");
        Ok(())
    }

    /// Replaces in-memory state with the persisted file. A missing file
    /// yields empty state; a corrupt or truncated one is an error.
    pub fn restore(&self) -> Result<(), ServerError> {
        let path = &self.config.persistence_path;
        let err = |message: String| ServerError::State {
            path: path.clone(),
            message,
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                *self.state.lock() = State::default();
                return Ok(());
            }
            Err(e) => return Err(err(e.to_string())),
        };
        let mut st = State::default();
        let mut count = 0u64;
        let mut ended = false;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if ended {
                return Err(err(format!("line {lineno}: data after end record")));
            }
            let rec: Record =
                serde_json::from_str(line).map_err(|e| err(format!("line {lineno}: {e}")))?;
            match rec {
                Record::Header { format } if i == 0 => {
                    if format != STATE_FORMAT {
                        return Err(err(format!("unsupported state format `{format}`")));
                    }
                }
                _ if i == 0 => return Err(err("missing header record".into())),
                Record::Header { .. } => return Err(err(format!("line {lineno}: duplicate header"))),
                Record::Context { salted_hash, users } => {
                    st.contexts.insert(salted_hash, users.into_iter().collect());
                }
                Record::Entry { salted_hash, users } => {
                    st.entries.insert(salted_hash, users.into_iter().collect());
                }
                Record::Quota { user, entries, queries } => {
                    st.quotas.insert(user, Quota {
                        entries: Window { events: entries.into() },
                        queries: Window { events: queries.into() },
                    });
                }
                Record::Blocked { user } => {
                    st.blocked.insert(user);
                }
                Record::End { records } => {
                    if records != count {
                        return Err(err(format!("end record expects {records} records, found {count}")));
                    }
                    ended = true;
                    continue;
                }
            }
            count += 1;
        }
        if !ended {
            return Err(err("file is truncated (no end record)".into()));
        }
        *self.state.lock() = st;
        Ok(())
    }

    #[cfg(test)]
    fn snapshot_eq(&self, other: &Aggregator) -> bool {
        *self.state.lock() == *other.state.lock()
    }
}

impl AggregationService for Aggregator {
    fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ServiceError> {
        if req.pair_hashes.is_empty() {
            return Err(ServiceError::Malformed("pair_hashes must not be empty".into()));
        }
        let ctx = self.salt_hash(&req.context_hash);
        let pairs: Vec<SaltedHash> = req.pair_hashes.iter().map(|h| self.salt_hash(h)).collect();
        let mut st = self.state.lock();
        self.gate(&mut st, &req.user_id, RequestKind::Ingest, pairs.len() as u64)?;
        st.contexts.entry(ctx).or_default().insert(req.user_id.clone());
        let mut ack = IngestResponse::default();
        for p in pairs {
            if st.entries.entry(p).or_default().insert(req.user_id.clone()) {
                ack.new += 1;
            } else {
                ack.duplicate += 1;
            }
        }
        Ok(ack)
    }

    fn uniqueness(&self, req: &UniquenessRequest) -> Result<UniquenessResponse, ServiceError> {
        let salted: Vec<(SaltedHash, SaltedHash)> = req
            .queries
            .iter()
            .map(|q| (self.salt_hash(&q.context_hash), self.salt_hash(&q.pair_hash)))
            .collect();
        let mut st = self.state.lock();
        self.gate(&mut st, &req.user_id, RequestKind::Uniqueness, salted.len() as u64)?;
        let results = salted
            .into_iter()
            .map(|(c, p)| UniquenessResult {
                verdict: self.verdict_locked(&st, &c, &p),
                salted_pair_hash: p,
            })
            .collect();
        Ok(UniquenessResponse { results })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::{client_hash_context, client_hash_pair};
    use crate::ui_model::AppContext;
    use num_bigint::BigUint;
    use num_rational::BigRational;
    use proptest::prelude::*;

    /// Exact rational tail for t = num/den.
    fn oracle_tail(f: u64, g: u64, num: u64, den: u64) -> f64 {
        let binom = |n: u64, k: u64| -> BigUint {
            let mut c = BigUint::from(1u32);
            for i in 0..k {
                c = c * BigUint::from(n - i) / BigUint::from(i + 1);
            }
            c
        };
        let mut sum = BigRational::from_integer(0.into());
        for k in f..=g {
            let term = binom(g, k) * BigUint::from(num).pow(k as u32) * BigUint::from(den - num).pow((g - k) as u32);
            sum += BigRational::new(term.into(), BigUint::from(den).pow(g as u32).into());
        }
        let (n, d) = (sum.numer().clone(), sum.denom().clone());
        // Scale to keep f64 conversion precise.
        let scaled: BigUint = (n.to_biguint().unwrap() << 120u32) / d.to_biguint().unwrap();
        let digits = scaled.to_u64_digits();
        let mut v = 0f64;
        for (i, limb) in digits.iter().enumerate() {
            v += *limb as f64 * 2f64.powi(64 * i as i32);
        }
        v / 2f64.powi(120)
    }

    #[test]
    fn tail_values() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(exact_binomial_tail(5, 5, 0.5).unwrap(), 0.03125));
        assert!(close(exact_binomial_tail(4, 5, 0.5).unwrap(), 0.1875));
        assert_eq!(exact_binomial_tail(0, 5, 0.5).unwrap(), 1.0);
        assert!(close(exact_binomial_tail(10, 10, 0.5).unwrap(), 2f64.powi(-10)));
        assert!(exact_binomial_tail(6, 5, 0.5).is_err());
        assert!(exact_binomial_tail(1, 5, 1.0).is_err());
        assert!(exact_binomial_tail(1, 5, 0.0).is_err());
    }

    #[test]
    fn tail_matches_rational_oracle() {
        for (num, den) in [(1, 2), (1, 10), (3, 4), (9, 10)] {
            let t = num as f64 / den as f64;
            for g in 0..=64 {
                for f in 0..=g {
                    let got = exact_binomial_tail(f, g, t).unwrap();
                    let want = oracle_tail(f, g, num, den);
                    assert!((got - want).abs() < 1e-12, "f={f} g={g} t={t}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn large_g_is_stable() {
        let p = exact_binomial_tail(5000, 10_000, 0.5).unwrap();
        assert!((p - 0.503_989_323_069_691_1).abs() < 1e-9, "{p}");
        assert!(exact_binomial_tail(10_000, 10_000, 0.5).unwrap() >= 0.0);
    }

    #[test]
    fn minimum_evidence_bound() {
        for g in 0..5 {
            for f in 0..=g {
                assert!(!UniquenessVerdict::compute(f, g, 0.5, 0.05).public, "F={f} G={g}");
            }
        }
        assert!(UniquenessVerdict::compute(5, 5, 0.5, 0.05).public);
    }

    #[test]
    fn unseen_context_defaults_personal() {
        let v = UniquenessVerdict::compute(0, 0, 0.5, 0.05);
        assert_eq!((v.public, v.p_value, v.h()), (false, 1.0, None));
    }

    fn agg_with(dir: &Path, clock: Arc<dyn Clock>) -> Aggregator {
        let mut c = ServerConfig::new(dir.join("state.jsonl"));
        c.quota_entries_per_day = 20;
        c.quota_queries_per_day = 10;
        Aggregator::with_clock(c, Salt::from_bytes(&[7u8; 64]).unwrap(), clock).unwrap()
    }

    fn ctx() -> AppContext {
        AppContext::new("com.amex", "Pay").unwrap()
    }

    fn ingest_req(user: u128, contents: &[&str]) -> IngestRequest {
        IngestRequest {
            user_id: UserId::from_u128(user),
            context_hash: client_hash_context(&ctx()).unwrap(),
            pair_hashes: contents.iter().map(|c| client_hash_pair(&ctx(), c).unwrap()).collect(),
        }
    }

    fn query_req(user: u128, content: &str) -> UniquenessRequest {
        UniquenessRequest {
            user_id: UserId::from_u128(user),
            queries: vec![UniquenessQuery {
                context_hash: client_hash_context(&ctx()).unwrap(),
                pair_hash: client_hash_pair(&ctx(), content).unwrap(),
            }],
        }
    }

    #[test]
    fn ingest_is_idempotent_and_counts_users() {
        let dir = tempfile::tempdir().unwrap();
        let agg = agg_with(dir.path(), Arc::new(ManualClock::new(0)));
        assert_eq!(agg.ingest(&ingest_req(1, &["Pay", "Bob"])).unwrap(), IngestResponse { new: 2, duplicate: 0 });
        assert_eq!(agg.ingest(&ingest_req(1, &["Pay", "Bob"])).unwrap(), IngestResponse { new: 0, duplicate: 2 });
        for u in 2..=5 {
            agg.ingest(&ingest_req(u, &["Pay"])).unwrap();
        }
        let r = agg.uniqueness(&query_req(9, "Pay")).unwrap().results[0].clone();
        assert_eq!((r.verdict.f, r.verdict.g, r.verdict.public), (5, 5, true));
        let r = agg.uniqueness(&query_req(9, "Bob")).unwrap().results[0].clone();
        assert_eq!((r.verdict.f, r.verdict.g, r.verdict.public), (1, 5, false));
        assert_eq!(r.salted_pair_hash, agg.salt_hash(&client_hash_pair(&ctx(), "Bob").unwrap()));
        assert!(agg.ingest(&ingest_req(1, &[])).is_err());
    }

    #[test]
    fn four_of_five_is_personal() {
        let dir = tempfile::tempdir().unwrap();
        let agg = agg_with(dir.path(), Arc::new(ManualClock::new(0)));
        for u in 1..=5 {
            let contents: &[&str] = if u == 5 { &["other"] } else { &["Pay", "other"] };
            agg.ingest(&ingest_req(u, contents)).unwrap();
        }
        let v = agg.uniqueness(&query_req(9, "Pay")).unwrap().results[0].verdict;
        assert_eq!((v.f, v.g), (4, 5));
        assert!((v.p_value - 0.1875).abs() < 1e-12);
        assert!(!v.public);
    }

    #[test]
    fn quotas_reject_then_block() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(1_000));
        let agg = agg_with(dir.path(), clock.clone());
        for _ in 0..10 {
            agg.uniqueness(&query_req(1, "x")).unwrap();
        }
        assert!(matches!(
            agg.uniqueness(&query_req(1, "x")),
            Err(ServiceError::QuotaExceeded { retry_after_s: WINDOW_SECS })
        ));
        for _ in 12..=30 {
            assert!(matches!(agg.uniqueness(&query_req(1, "x")), Err(ServiceError::QuotaExceeded { .. })));
        }
        assert_eq!(agg.uniqueness(&query_req(1, "x")), Err(ServiceError::Blocked));
        clock.advance(WINDOW_SECS * 10);
        assert_eq!(agg.uniqueness(&query_req(1, "x")), Err(ServiceError::Blocked), "blocks are permanent");
        assert_eq!(agg.ingest(&ingest_req(1, &["a"])), Err(ServiceError::Blocked));
    }

    #[test]
    fn window_slides() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(0));
        let agg = agg_with(dir.path(), clock.clone());
        let contents: Vec<String> = (0..20).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = contents.iter().map(String::as_str).collect();
        agg.ingest(&ingest_req(2, &refs)).unwrap();
        assert!(matches!(agg.ingest(&ingest_req(2, &["one more"])), Err(ServiceError::QuotaExceeded { .. })));
        clock.advance(WINDOW_SECS);
        assert!(agg.ingest(&ingest_req(2, &["one more"])).is_ok());
        assert_eq!(agg.anomaly_check(&UserId::from_u128(77), RequestKind::Ingest, 1), Decision::Allow);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(5));
        let agg = agg_with(dir.path(), clock.clone());
        for u in 1..=5 {
            agg.ingest(&ingest_req(u, &["Pay", &format!("user{u}")])).unwrap();
        }
        for _ in 0..40 {
            let _ = agg.uniqueness(&query_req(66, "Pay"));
        }
        assert!(agg.is_blocked(&UserId::from_u128(66)));
        agg.persist().unwrap();

        let again = agg_with(dir.path(), clock);
        again.restore().unwrap();
        assert!(agg.snapshot_eq(&again));
        let a = agg.verdict_salted(
            &agg.salt_hash(&client_hash_context(&ctx()).unwrap()),
            &agg.salt_hash(&client_hash_pair(&ctx(), "Pay").unwrap()),
        );
        let b = again.uniqueness(&query_req(3, "Pay")).unwrap().results[0].verdict;
        assert_eq!((a.f, a.g), (b.f, b.g));
        assert_eq!(again.health().entries, 6);
    }

    #[test]
    fn missing_and_truncated_state() {
        let dir = tempfile::tempdir().unwrap();
        let agg = agg_with(dir.path(), Arc::new(ManualClock::new(0)));
        agg.restore().unwrap();
        assert_eq!(agg.health().contexts, 0);
        agg.ingest(&ingest_req(1, &["a", "b"])).unwrap();
        agg.persist().unwrap();
        let path = dir.path().join("state.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        fs::write(&path, cut[..cut.len() - 1].join("\n")).unwrap();
        assert!(matches!(agg.restore(), Err(ServerError::State { .. })));
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(agg.restore().is_err());
        fs::write(&path, "garbage\n").unwrap();
        assert!(agg.restore().is_err());
    }

    #[test]
    fn state_file_holds_no_plaintext() {
        let dir = tempfile::tempdir().unwrap();
        let agg = agg_with(dir.path(), Arc::new(ManualClock::new(0)));
        agg.ingest(&ingest_req(1, &["Checking Account (...1234)"])).unwrap();
        agg.persist().unwrap();
        let text = fs::read_to_string(dir.path().join("state.jsonl")).unwrap();
        for planted in ["Checking", "1234", "com.amex", "Pay"] {
            assert!(!text.contains(planted), "{planted}");
        }
        let client = client_hash_pair(&ctx(), "Checking Account (...1234)").unwrap();
        assert!(!text.contains(client.as_str()), "only salted hashes are stored");
    }

    #[test]
    fn config_parsing() {
        let c = ServerConfig::from_toml("persistence_path = \"s.jsonl\"\n").unwrap();
        assert_eq!((c.t, c.alpha, c.quota_entries_per_day, c.quota_queries_per_day), (0.5, 0.05, 10_000, 1_000));
        assert!(ServerConfig::from_toml("t = 1.0\npersistence_path = \"s\"").is_err());
        assert!(ServerConfig::from_toml("alpha = 0\npersistence_path = \"s\"").is_err());
        assert!(ServerConfig::from_toml("bogus = 1\npersistence_path = \"s\"").is_err());
    }

    #[test]
    fn wire_format() {
        let r = UniquenessResult {
            salted_pair_hash: SaltedHash::parse(&"a".repeat(128)).unwrap(),
            verdict: UniquenessVerdict::compute(5, 5, 0.5, 0.05),
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["f"], 5);
        assert_eq!(v["g"], 5);
        assert_eq!(v["public"], true);
        assert_eq!(v["p_value"], 0.03125);
        let bad = r#"{"user_id":"00000000-0000-0000-0000-000000000001","context_hash":"zz","pair_hashes":[]}"#;
        assert!(serde_json::from_str::<IngestRequest>(bad).is_err());
    }

    proptest! {
        #[test]
        fn f_never_exceeds_g_and_counts_monotone(
            ops in prop::collection::vec((0u128..8, prop::collection::vec(0usize..4, 1..4)), 1..40)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let agg = agg_with(dir.path(), Arc::new(ManualClock::new(0)));
            let words = ["w0", "w1", "w2", "w3"];
            let mut prev = [(0u64, 0u64); 4];
            for (user, picks) in ops {
                let contents: Vec<&str> = picks.iter().map(|&i| words[i]).collect();
                let _ = agg.ingest(&ingest_req(user, &contents));
                for (i, w) in words.iter().enumerate() {
                    let v = agg.verdict_salted(
                        &agg.salt_hash(&client_hash_context(&ctx()).unwrap()),
                        &agg.salt_hash(&client_hash_pair(&ctx(), w).unwrap()),
                    );
                    prop_assert!(v.f <= v.g);
                    prop_assert!(v.f >= prev[i].0 && v.g >= prev[i].1);
                    prop_assert_eq!(v.public, v.g > 0 && exact_binomial_tail(v.f, v.g, 0.5).unwrap() < 0.05);
                    prev[i] = (v.f, v.g);
                }
            }
        }

        #[test]
        fn tail_is_a_probability(g in 0u64..400, frac in 0.0f64..=1.0, t in 0.01f64..0.99) {
            let f = (g as f64 * frac) as u64;
            let p = exact_binomial_tail(f, g, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            if f < g {
                prop_assert!(exact_binomial_tail(f + 1, g, t).unwrap() <= p + 1e-12);
            }
        }
    }
}
