//! HTTP front end for the aggregation service.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;
use tokio::sync::oneshot;

use crate::server::{AggregationService, Aggregator, ServerError, ServiceError};

pub(crate) fn error_response(err: &ServiceError) -> Response {
    let body = Json(json!({ "error": err.to_string() }));
    match err {
        ServiceError::Malformed(_) => (StatusCode::BAD_REQUEST, body).into_response(),
        ServiceError::QuotaExceeded { retry_after_s } => (
            StatusCode::TOO_MANY_REQUESTS,
            [(header::RETRY_AFTER, retry_after_s.to_string())],
            body,
        )
            .into_response(),
        ServiceError::Blocked => (StatusCode::FORBIDDEN, body).into_response(),
        ServiceError::Transport(_) => (StatusCode::INTERNAL_SERVER_ERROR, body).into_response(),
    }
}

pub(crate) fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        error_response(&ServiceError::Malformed(format!("{}: {}", e.path(), e.inner())))
    })
}

async fn persist_in_background(agg: &Arc<Aggregator>) {
    let agg = agg.clone();
    let res = tokio::task::spawn_blocking(move || agg.persist()).await;
    match res {
        Ok(Err(e)) => tracing::error!(error = %e, "persisting state failed"),
        Err(e) => tracing::error!(error = %e, "persist task panicked"),
        Ok(Ok(())) => {}
    }
}

async fn ingest(State(agg): State<Arc<Aggregator>>, body: Bytes) -> Response {
    let req = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let res = agg.ingest(&req);
    persist_in_background(&agg).await;
    match res {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn uniqueness(State(agg): State<Arc<Aggregator>>, body: Bytes) -> Response {
    let req = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let res = agg.uniqueness(&req);
    if matches!(res, Err(ServiceError::Blocked)) {
        persist_in_background(&agg).await;
    }
    match res {
        Ok(r) => Json(r).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn health(State(agg): State<Arc<Aggregator>>) -> Response {
    Json(agg.health()).into_response()
}

pub fn router(agg: Arc<Aggregator>) -> Router {
    Router::new()
        .route("/v1/ingest", post(ingest))
        .route("/v1/uniqueness", post(uniqueness))
        .route("/v1/health", get(health))
        .with_state(agg)
}

/// Serves until `shutdown` resolves, then persists state.
pub async fn serve(
    agg: Arc<Aggregator>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let app = router(agg.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServerError::Config(format!("server error: {e}")))?;
    let persisted = agg.clone();
    tokio::task::spawn_blocking(move || persisted.persist())
        .await
        .map_err(|e| ServerError::Config(e.to_string()))?
}

/// Resolves on ctrl-c, or SIGTERM on unix.
async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Blocking entry point: binds `addr`, reports the bound address through
/// `on_ready`, and serves until interrupted.
pub fn run_blocking(
    agg: Arc<Aggregator>,
    addr: SocketAddr,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), ServerError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServerError::Config(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ServerError::Config(format!("bind {addr}: {e}")))?;
        let bound = listener.local_addr().map_err(|e| ServerError::Config(e.to_string()))?;
        tracing::info!(addr = %bound, "aggregation server listening");
        on_ready(bound);
        serve(agg, listener, shutdown_signal()).await
    })
}

/// A server running on a background thread, for embedding and tests.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), ServerError>>>,
}

impl ServerHandle {
    pub fn start(agg: Arc<Aggregator>, addr: SocketAddr) -> Result<Self, ServerError> {
        let std_listener = std::net::TcpListener::bind(addr).map_err(|e| ServerError::Config(format!("bind {addr}: {e}")))?;
        std_listener
            .set_nonblocking(true)
            .map_err(|e| ServerError::Config(e.to_string()))?;
        let addr = std_listener.local_addr().map_err(|e| ServerError::Config(e.to_string()))?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .map_err(|e| ServerError::Config(e.to_string()))?;
            rt.block_on(async move {
                let listener =
                    tokio::net::TcpListener::from_std(std_listener).map_err(|e| ServerError::Config(e.to_string()))?;
                serve(agg, listener, async {
                    let _ = rx.await;
                })
                .await
            })
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops the server and waits for the final persist.
    pub fn stop(mut self) -> Result<(), ServerError> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> Result<(), ServerError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(ServerError::Config("server thread panicked".into()))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}
