//! Thin async client of the estimation service.
//!
//! The service speaks JSON over HTTP:
//!
//! | method | path              | body                | response           |
//! |--------|-------------------|---------------------|--------------------|
//! | GET    | `/v1/health`      |                     | [`Health`]         |
//! | POST   | `/v1/experiments` | [`ExperimentRequest`] | `ExperimentReport` |
//! | POST   | `/v1/replays`     | [`ReplayRequest`]   | `ExperimentReport` |
//! | POST   | `/v1/logs`        | [`EmitRequest`]     | [`EmitResponse`]   |
//!
//! Failures come back with a 4xx or 5xx status and an [`ApiError`] body.
//! Measurement logs travel as their JSON-lines text, so parse errors name
//! lines of the original file.

pub mod api;

pub use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use rise_core::config::ExperimentConfig;
use rise_core::experiment::ExperimentReport;
use rise_core::simulator::{GroundTruth, MeasurementLog};

pub use api::{ApiError, EmitRequest, EmitResponse, ErrorKind, ExperimentRequest, Health, ReplayRequest};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),

    /// The service rejected the request or failed while serving it.
    #[error("service error ({status}): {}", body.message)]
    Api { status: StatusCode, body: ApiError },

    #[error("unreadable response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ClientError::Api { body, .. } => Some(body.kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// A client of the service at `base`, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Client { base, http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub async fn health(&self) -> Result<Health> {
        let resp = self.http.get(format!("{}/v1/health", self.base)).send().await?;
        decode(resp).await
    }

    pub async fn run_experiment(&self, config: &ExperimentConfig) -> Result<ExperimentReport> {
        self.post("/v1/experiments", &ExperimentRequest { config: config.clone() }).await
    }

    /// Replays a log given as its JSON-lines text.
    pub async fn replay(&self, config: &ExperimentConfig, log: String, truth: Option<GroundTruth>) -> Result<ExperimentReport> {
        self.post("/v1/replays", &ReplayRequest { config: config.clone(), log, truth }).await
    }

    /// The measurement log of run `run` of the experiment with its ground truth.
    pub async fn emit(&self, config: &ExperimentConfig, run: usize) -> Result<(MeasurementLog, GroundTruth)> {
        let resp: EmitResponse = self.post("/v1/logs", &EmitRequest { config: config.clone(), run }).await?;
        let log = MeasurementLog::from_jsonl(&resp.log).map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok((log, resp.truth))
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        decode(resp).await
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
    let status = resp.status();
    let bytes = resp.bytes().await?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()));
    }
    let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| ApiError {
        kind: ErrorKind::Internal,
        message: String::from_utf8_lossy(&bytes).into_owned(),
    });
    Err(ClientError::Api { status, body })
}
