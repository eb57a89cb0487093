//! Client side of the aggregation protocol: hashing local screens into
//! requests, the persistent anonymous identity, an HTTP transport, and a
//! recording wrapper that captures exactly what goes over the wire.

use std::fs;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::hashing::{client_hash_context, client_hash_pair, HashError, UserId};
use crate::server::{
    AggregationService, IngestRequest, IngestResponse, ServiceError, UniquenessRequest, UniquenessResponse,
};
use crate::ui_model::{extract_entries, UiSnapshotGraph};

pub const SERVER_URL_ENV: &str = "PINALITE_SERVER_URL";

/// Hashes every information entry of a snapshot. `None` when the screen has
/// no text at all.
pub fn snapshot_request(user: &UserId, graph: &UiSnapshotGraph) -> Result<Option<IngestRequest>, HashError> {
    let entries = extract_entries(graph);
    if entries.is_empty() {
        return Ok(None);
    }
    let pair_hashes = entries
        .iter()
        .map(|e| client_hash_pair(&e.context, &e.content))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(IngestRequest {
        user_id: user.clone(),
        context_hash: client_hash_context(graph.context())?,
        pair_hashes,
    }))
}

/// Background collection for one screen.
pub fn ingest_snapshot(
    service: &dyn AggregationService,
    user: &UserId,
    graph: &UiSnapshotGraph,
) -> Result<IngestResponse, ServiceError> {
    match snapshot_request(user, graph).map_err(|e| ServiceError::Malformed(e.to_string()))? {
        Some(req) => service.ingest(&req),
        None => Ok(IngestResponse::default()),
    }
}

/// Local client identity; survives across invocations until reset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub user_id: UserId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_url: Option<String>,
}

impl ClientConfig {
    pub fn load_or_create(path: &Path) -> std::io::Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let c = Self {
                    user_id: UserId::generate(),
                    server_url: None,
                };
                c.save(path)?;
                Ok(c)
            }
            Err(e) => Err(e),
        }
    }

    pub fn reset(path: &Path) -> std::io::Result<Self> {
        let mut c = Self::load_or_create(path)?;
        c.user_id = UserId::generate();
        c.save(path)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self).expect("config serializes") + "\n")
    }

    /// `PINALITE_SERVER_URL` overrides the stored URL.
    pub fn server_url(&self) -> Option<String> {
        std::env::var(SERVER_URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.server_url.clone())
    }
}

/// Captures the serialized body of every request before forwarding it.
pub struct Recording<S> {
    inner: S,
    log: Mutex<Vec<String>>,
}

impl<S: AggregationService> Recording<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn payloads(&self) -> Vec<String> {
        self.log.lock().clone()
    }

    pub fn into_inner(self) -> S {
        self.inner
    }

    fn record(&self, body: &impl Serialize) {
        self.log.lock().push(serde_json::to_string(body).expect("requests serialize"));
    }
}

impl<S: AggregationService> AggregationService for Recording<S> {
    fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ServiceError> {
        self.record(req);
        self.inner.ingest(req)
    }

    fn uniqueness(&self, req: &UniquenessRequest) -> Result<UniquenessResponse, ServiceError> {
        self.record(req);
        self.inner.uniqueness(req)
    }
}

#[cfg(feature = "http")]
pub use http_client::HttpClient;

#[cfg(feature = "http")]
mod http_client {
    use std::time::Duration;

    use serde::de::DeserializeOwned;
    use serde::Serialize;

    use super::*;
    use crate::server::HealthResponse;

    /// Blocking JSON client for the aggregation server.
    pub struct HttpClient {
        base: String,
        agent: ureq::Agent,
    }

    fn transport(e: impl std::fmt::Display) -> ServiceError {
        ServiceError::Transport(e.to_string())
    }

    impl HttpClient {
        pub fn new(base_url: &str) -> Self {
            let agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(30)))
                .build()
                .into();
            Self {
                base: base_url.trim_end_matches('/').to_owned(),
                agent,
            }
        }

        fn decode<R: DeserializeOwned>(&self, mut resp: ureq::http::Response<ureq::Body>) -> Result<R, ServiceError> {
            let status = resp.status().as_u16();
            if status == 200 {
                return resp.body_mut().read_json().map_err(transport);
            }
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse().ok());
            let message = resp
                .body_mut()
                .read_json::<serde_json::Value>()
                .ok()
                .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_owned))
                .unwrap_or_else(|| format!("HTTP {status}"));
            Err(match status {
                400 => ServiceError::Malformed(message),
                429 => ServiceError::QuotaExceeded {
                    retry_after_s: retry_after.unwrap_or(0),
                },
                403 => ServiceError::Blocked,
                _ => ServiceError::Transport(format!("HTTP {status}: {message}")),
            })
        }

        fn post<T: Serialize, R: DeserializeOwned>(&self, path: &str, body: &T) -> Result<R, ServiceError> {
            let resp = self
                .agent
                .post(format!("{}{path}", self.base))
                .send_json(body)
                .map_err(transport)?;
            self.decode(resp)
        }

        pub fn health(&self) -> Result<HealthResponse, ServiceError> {
            let resp = self
                .agent
                .get(format!("{}/v1/health", self.base))
                .call()
                .map_err(transport)?;
            self.decode(resp)
        }
    }

    impl AggregationService for HttpClient {
        fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ServiceError> {
            self.post("/v1/ingest", req)
        }

        fn uniqueness(&self, req: &UniquenessRequest) -> Result<UniquenessResponse, ServiceError> {
            self.post("/v1/uniqueness", req)
        }
    }
}
