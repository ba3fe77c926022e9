//! HTTP service exposing experiments, log replays and log emission.
//!
//! The wire types and routes are defined in `rise_client::api`. Every
//! computation runs on the blocking pool, so a long Monte Carlo experiment
//! does not stall other requests.

use std::future::Future;
use std::net::SocketAddr;

use axum::extract::rejection::JsonRejection;
use axum::extract::DefaultBodyLimit;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use rise_client::api::{ApiError, EmitRequest, EmitResponse, ErrorKind, ExperimentRequest, Health, ReplayRequest};
use rise_core::experiment::{emit_experiment_log, evaluate_experiment, evaluate_replay, ExperimentReport};
use rise_core::simulator::MeasurementLog;

/// Request bodies carry whole measurement logs.
const BODY_LIMIT: usize = 512 * 1024 * 1024;

pub struct Failure(StatusCode, ApiError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<rise_core::Error> for Failure {
    fn from(e: rise_core::Error) -> Self {
        let body = ApiError::from(&e);
        let status = match body.kind {
            ErrorKind::Request | ErrorKind::Config | ErrorKind::Log => StatusCode::BAD_REQUEST,
            ErrorKind::OracleCheck | ErrorKind::Estimation => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Failure(status, body)
    }
}

impl From<JsonRejection> for Failure {
    fn from(e: JsonRejection) -> Self {
        Failure(e.status(), ApiError { kind: ErrorKind::Request, message: e.body_text() })
    }
}

type Reply<T> = Result<Json<T>, Failure>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> rise_core::Result<T> + Send + 'static) -> Result<T, Failure> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(|e| {
            tracing::warn!(error = %e, "request failed");
            Failure::from(e)
        }),
        Err(e) => Err(Failure(
            StatusCode::INTERNAL_SERVER_ERROR,
            ApiError { kind: ErrorKind::Internal, message: format!("worker failed: {e}") },
        )),
    }
}

fn ok<T: Serialize>(v: T) -> Reply<T> {
    Ok(Json(v))
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn experiment(body: Result<Json<ExperimentRequest>, JsonRejection>) -> Reply<ExperimentReport> {
    let Json(req) = body?;
    tracing::info!(estimator = ?req.config.pipeline.estimator, n_runs = req.config.run.n_runs, "experiment");
    ok(blocking(move || evaluate_experiment(&req.config)).await?)
}

async fn replay(body: Result<Json<ReplayRequest>, JsonRejection>) -> Reply<ExperimentReport> {
    let Json(req) = body?;
    tracing::info!(bytes = req.log.len(), "replay");
    ok(blocking(move || {
        let log = MeasurementLog::from_jsonl(&req.log)?;
        evaluate_replay(&log, &req.config, req.truth)
    })
    .await?)
}

async fn emit(body: Result<Json<EmitRequest>, JsonRejection>) -> Reply<EmitResponse> {
    let Json(req) = body?;
    tracing::info!(run = req.run, "emit");
    ok(blocking(move || {
        let (log, truth) = emit_experiment_log(&req.config, req.run)?;
        Ok(EmitResponse { log: log.to_jsonl(), truth })
    })
    .await?)
}

pub fn router() -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/experiments", post(experiment))
        .route("/v1/replays", post(replay))
        .route("/v1/logs", post(emit))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
}

/// Serves on `listener` until `shutdown` resolves.
pub async fn serve(listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router()).with_graceful_shutdown(shutdown).await
}

/// A server running on the current runtime.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.task.await.map_err(std::io::Error::other)?
    }
}

/// Binds `addr` (port 0 picks a free one) and serves in the background.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel();
    let task = tokio::spawn(serve(listener, async {
        let _ = rx.await;
    }));
    tracing::debug!(%addr, "service listening");
    Ok(ServerHandle { addr, stop: Some(tx), task })
}
