//! Loopback HTTP endpoint backing the interactive review of a share.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{oneshot, Notify};

use crate::http::parse_body;
use crate::obfuscator::{obfuscate, preview, ObfuscateError, ObfuscationReport};
use crate::script::{serialize_script, Finding, Script};
use crate::server::ServerError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleRequest {
    pub entry_id: usize,
    pub public: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmResponse {
    pub shared_path: PathBuf,
}

/// What a confirmed review produced.
#[derive(Clone, Debug)]
pub struct ReviewOutcome {
    pub shared_path: PathBuf,
    pub report: ObfuscationReport,
    pub warnings: Vec<Finding>,
}

struct ReviewState {
    report: ObfuscationReport,
    outcome: Option<ReviewOutcome>,
}

/// A classified script awaiting the author's decisions. Toggles are
/// serialized through one lock.
pub struct ReviewSession {
    script: Script,
    out_path: PathBuf,
    state: Mutex<ReviewState>,
    confirmed: Notify,
}

impl ReviewSession {
    pub fn new(script: Script, report: ObfuscationReport, out_path: impl Into<PathBuf>) -> Self {
        Self {
            script,
            out_path: out_path.into(),
            state: Mutex::new(ReviewState { report, outcome: None }),
            confirmed: Notify::new(),
        }
    }

    pub fn report(&self) -> ObfuscationReport {
        self.state.lock().report.clone()
    }

    pub fn outcome(&self) -> Option<ReviewOutcome> {
        self.state.lock().outcome.clone()
    }
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn report(State(s): State<Arc<ReviewSession>>) -> Response {
    Json(s.report()).into_response()
}

async fn script_preview(State(s): State<Arc<ReviewSession>>) -> Response {
    let st = s.state.lock();
    Json(json!({ "script": st.report.script, "steps": preview(&s.script, &st.report) })).into_response()
}

async fn toggle(State(s): State<Arc<ReviewSession>>, body: Bytes) -> Response {
    let req: ToggleRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let mut st = s.state.lock();
    if st.outcome.is_some() {
        return error(StatusCode::CONFLICT, "review already confirmed");
    }
    match st.report.toggle(req.entry_id, req.public) {
        Ok(entry) => Json(entry.clone()).into_response(),
        Err(e @ ObfuscateError::UnknownEntry(_)) => error(StatusCode::NOT_FOUND, e),
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

async fn confirm(State(s): State<Arc<ReviewSession>>) -> Response {
    let mut st = s.state.lock();
    if let Some(done) = &st.outcome {
        return Json(ConfirmResponse {
            shared_path: done.shared_path.clone(),
        })
        .into_response();
    }
    let shared = match obfuscate(&s.script, &st.report) {
        Ok(out) => out,
        Err(e @ ObfuscateError::Leak { .. }) => return error(StatusCode::CONFLICT, e),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    if let Err(e) = std::fs::write(&s.out_path, serialize_script(&shared.script)) {
        return error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("writing {}: {e}", s.out_path.display()),
        );
    }
    st.outcome = Some(ReviewOutcome {
        shared_path: s.out_path.clone(),
        report: st.report.clone(),
        warnings: shared.warnings,
    });
    s.confirmed.notify_one();
    Json(ConfirmResponse {
        shared_path: s.out_path.clone(),
    })
    .into_response()
}

pub fn review_router(session: Arc<ReviewSession>) -> Router {
    Router::new()
        .route("/api/report", get(report))
        .route("/api/script-preview", get(script_preview))
        .route("/api/toggle", post(toggle))
        .route("/api/confirm", post(confirm))
        .with_state(session)
}

/// A review endpoint on a background thread. Only loopback addresses are
/// accepted since the report holds plaintext.
pub struct ReviewServer {
    pub addr: SocketAddr,
    session: Arc<ReviewSession>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), ServerError>>>,
}

impl ReviewServer {
    pub fn start(session: Arc<ReviewSession>, addr: SocketAddr) -> Result<Self, ServerError> {
        if !addr.ip().is_loopback() {
            return Err(ServerError::Config(format!("review endpoint must bind to loopback, got {addr}")));
        }
        let cfg = |e: std::io::Error| ServerError::Config(e.to_string());
        let listener = std::net::TcpListener::bind(addr).map_err(cfg)?;
        listener.set_nonblocking(true).map_err(cfg)?;
        let addr = listener.local_addr().map_err(cfg)?;
        let (tx, rx) = oneshot::channel::<()>();
        let shared = session.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(cfg)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).map_err(cfg)?;
                let done = shared.clone();
                axum::serve(listener, review_router(shared))
                    .with_graceful_shutdown(async move {
                        tokio::select! {
                            _ = done.confirmed.notified() => {}
                            _ = rx => {}
                        }
                    })
                    .await
                    .map_err(cfg)
            })
        });
        Ok(Self {
            addr,
            session,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the author confirms, then shuts the endpoint down.
    pub fn wait_confirmed(mut self) -> Result<ReviewOutcome, ServerError> {
        if let Some(t) = self.thread.take() {
            t.join()
                .unwrap_or_else(|_| Err(ServerError::Config("review thread panicked".into())))?;
        }
        self.session
            .outcome()
            .ok_or_else(|| ServerError::Config("review ended without confirmation".into()))
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ReviewServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
