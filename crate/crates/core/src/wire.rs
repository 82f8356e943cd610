//! JSON bodies of the HTTP prediction protocol.
//!
//! Oracle: `POST /v1/predict` with [`PredictRequest`] answers [`PredictResponse`].
//! Debiasing proxy: the same request answers [`ProxyResponse`].

use serde::{Deserialize, Serialize};

pub const PREDICT_PATH: &str = "/v1/predict";
pub const HEALTH_PATH: &str = "/health";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyResponse {
    pub raw: Vec<Vec<f64>>,
    pub fair: Vec<Vec<f64>>,
    pub argmax_raw: Vec<usize>,
    pub argmax_fair: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}
