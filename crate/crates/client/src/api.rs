//! Request and response bodies shared by the service and its clients.

use serde::{Deserialize, Serialize};

use rise_core::config::ExperimentConfig;
use rise_core::simulator::GroundTruth;
use rise_core::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRequest {
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRequest {
    pub config: ExperimentConfig,
    /// The measurement log as JSON-lines text.
    pub log: String,
    #[serde(default)]
    pub truth: Option<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitRequest {
    pub config: ExperimentConfig,
    #[serde(default)]
    pub run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmitResponse {
    pub log: String,
    pub truth: GroundTruth,
}

/// Coarse failure class, stable across versions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    /// The request body is not valid JSON for the endpoint.
    Request,
    /// Configuration or parameter validation failed.
    Config,
    /// The measurement log does not parse.
    Log,
    /// The estimate left the dense batch solution under the oracle check.
    OracleCheck,
    /// The estimator refused the input, e.g. a singular factor.
    Estimation,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        let kind = match e {
            Error::Config { .. } | Error::Params(_) => ErrorKind::Config,
            Error::Parse { .. } | Error::Truncated(_) => ErrorKind::Log,
            Error::OracleCheck { .. } => ErrorKind::OracleCheck,
            Error::Io(_) => ErrorKind::Internal,
            _ => ErrorKind::Estimation,
        };
        ApiError { kind, message: e.to_string() }
    }
}
