//! HTTP services: the debiasing proxy and a reference oracle server.
//!
//! The proxy forwards each batch to the deployed model, evaluates the locally
//! loaded patch models on the same inputs and answers with both the raw and
//! the erased probabilities.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, Semaphore};
use tokio::task::JoinHandle;

use crate::error::{Error, Result};
use crate::nnet::MlpModel;
use crate::oracle::{NormalizePolicy, OracleHandle, RemoteConfig};
use crate::prob::{erase_multi, ProbVector};
use crate::wire::{ErrorBody, HealthResponse, PredictResponse, ProxyResponse, HEALTH_PATH, PREDICT_PATH};

pub const ENV_LISTEN_ADDR: &str = "LISTEN_ADDR";
pub const ENV_UPSTREAM_URL: &str = "UPSTREAM_URL";

/// The deployed model behind the proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upstream {
    Url(String),
    Model(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub listen: String,
    pub upstream: Option<Upstream>,
    pub patches: Vec<PathBuf>,
    pub normalize: NormalizePolicy,
    pub request_timeout_ms: u64,
    /// Concurrent requests admitted before answering 429.
    pub max_in_flight: usize,
    /// Settings for a remote upstream; `base_url` is taken from `upstream`.
    pub remote: RemoteConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            upstream: None,
            patches: Vec::new(),
            normalize: NormalizePolicy::default(),
            request_timeout_ms: 10_000,
            max_in_flight: 64,
            remote: RemoteConfig::default(),
        }
    }
}

impl ProxyConfig {
    /// Applies `LISTEN_ADDR` and `UPSTREAM_URL` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(addr) = std::env::var(ENV_LISTEN_ADDR) {
            self.listen = addr;
        }
        if let Ok(url) = std::env::var(ENV_UPSTREAM_URL) {
            self.upstream = Some(Upstream::Url(url));
        }
        self
    }
}

/// Monotonic request counters.
#[derive(Debug, Default)]
pub struct Counters {
    pub requests: AtomicU64,
    pub rejected: AtomicU64,
    pub upstream_errors: AtomicU64,
    pub client_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub requests: u64,
    pub rejected: u64,
    pub upstream_errors: u64,
    pub client_errors: u64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            upstream_errors: self.upstream_errors.load(Ordering::Relaxed),
            client_errors: self.client_errors.load(Ordering::Relaxed),
        }
    }
}

/// A server running on a background task.
pub struct RunningServer {
    addr: SocketAddr,
    counters: Arc<Counters>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    /// Stops accepting connections and waits up to `drain` for in-flight
    /// requests to finish.
    pub async fn shutdown(mut self, drain: Duration) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match tokio::time::timeout(drain, &mut self.task).await {
            Ok(joined) => joined
                .map_err(|e| Error::Io(std::io::Error::other(e)))?
                .map_err(Error::Io),
            Err(_) => {
                self.task.abort();
                Ok(())
            }
        }
    }

    /// Runs until ctrl-c, then drains.
    pub async fn run_until_ctrl_c(self, drain: Duration) -> Result<()> {
        tokio::signal::ctrl_c().await?;
        tracing::info!("shutting down");
        self.shutdown(drain).await
    }
}

struct ProxyState {
    oracle: OracleHandle,
    patches: Vec<MlpModel>,
    names: Vec<String>,
    k: usize,
    input_dim: usize,
    permits: Semaphore,
    timeout: Duration,
    counters: Arc<Counters>,
}

fn error_response(status: StatusCode, kind: &str, message: impl Into<String>, field: Option<String>) -> Response {
    let body = ErrorBody {
        error: kind.to_string(),
        message: message.into(),
        field,
    };
    (status, Json(body)).into_response()
}

struct BadRequest {
    message: String,
    field: String,
}

/// Parses `{"inputs": [[...], ...]}` and reports the path of the first bad field.
fn parse_inputs(body: &[u8]) -> std::result::Result<Vec<Vec<f64>>, BadRequest> {
    let bad = |message: &str, field: String| BadRequest {
        message: message.to_string(),
        field,
    };
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| bad(&format!("invalid JSON: {e}"), "$".into()))?;
    let inputs = value
        .get("inputs")
        .ok_or_else(|| bad("missing field", "inputs".into()))?
        .as_array()
        .ok_or_else(|| bad("expected an array of input vectors", "inputs".into()))?;
    inputs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row
                .as_array()
                .ok_or_else(|| bad("expected an array of numbers", format!("inputs[{i}]")))?;
            row.iter()
                .enumerate()
                .map(|(j, v)| {
                    v.as_f64()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| bad("expected a finite number", format!("inputs[{i}][{j}]")))
                })
                .collect()
        })
        .collect()
}

fn check_dims(inputs: &[Vec<f64>], dim: usize) -> Option<Response> {
    inputs.iter().position(|x| x.len() != dim).map(|i| {
        error_response(
            StatusCode::UNPROCESSABLE_ENTITY,
            "shape",
            format!("expected {dim} features, got {}", inputs[i].len()),
            Some(format!("inputs[{i}]")),
        )
    })
}

async fn proxy_health(State(state): State<Arc<ProxyState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        k: state.k,
        patches: Some(state.names.clone()),
    })
}

async fn proxy_predict(State(state): State<Arc<ProxyState>>, body: Bytes) -> Response {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let Ok(_permit) = state.permits.try_acquire() else {
        state.counters.rejected.fetch_add(1, Ordering::Relaxed);
        return error_response(
            StatusCode::TOO_MANY_REQUESTS,
            "busy",
            "too many requests in flight",
            None,
        );
    };
    let inputs = match parse_inputs(&body) {
        Ok(v) => v,
        Err(e) => {
            state.counters.client_errors.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::BAD_REQUEST, "bad_request", e.message, Some(e.field));
        }
    };
    if let Some(resp) = check_dims(&inputs, state.input_dim) {
        state.counters.client_errors.fetch_add(1, Ordering::Relaxed);
        return resp;
    }
    let raw = match tokio::time::timeout(state.timeout, state.oracle.query_batch_async(&inputs)).await {
        Err(_) => {
            state.counters.upstream_errors.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::GATEWAY_TIMEOUT, "timeout", "upstream timed out", None);
        }
        Ok(Err(e)) => {
            state.counters.upstream_errors.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::BAD_GATEWAY, e.kind(), e.to_string(), None);
        }
        Ok(Ok(raw)) => raw,
    };
    match erase_rows(&state.patches, &inputs, &raw) {
        Ok(fair) => Json(ProxyResponse {
            argmax_raw: raw.iter().map(ProbVector::argmax).collect(),
            argmax_fair: fair.iter().map(ProbVector::argmax).collect(),
            raw: raw.into_iter().map(ProbVector::into_inner).collect(),
            fair: fair.into_iter().map(ProbVector::into_inner).collect(),
        })
        .into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.kind(), e.to_string(), None),
    }
}

fn erase_rows(patches: &[MlpModel], inputs: &[Vec<f64>], raw: &[ProbVector]) -> Result<Vec<ProbVector>> {
    inputs
        .iter()
        .zip(raw)
        .map(|(x, p)| {
            let rules = patches.iter().map(|g| g.forward_probs(x)).collect::<Result<Vec<_>>>()?;
            erase_multi(p, &rules)
        })
        .collect()
}

fn patch_name(model: &MlpModel, path: &std::path::Path) -> String {
    model.metadata.bias_attr.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    })
}

async fn probe_upstream(config: &RemoteConfig, k: usize) -> Result<()> {
    let url = format!("{}{HEALTH_PATH}", config.base_url.trim_end_matches('/'));
    let client = reqwest::Client::builder()
        .timeout(Duration::from_millis(config.timeout_ms))
        .build()
        .map_err(|e| Error::Config(format!("http client: {e}")))?;
    let unavailable = |message: String| Error::UpstreamUnavailable { attempts: 1, message };
    let resp = client
        .get(&url)
        .send()
        .await
        .map_err(|e| unavailable(format!("{url}: {e}")))?;
    if !resp.status().is_success() {
        return Err(unavailable(format!("{url}: status {}", resp.status())));
    }
    let health: HealthResponse = resp.json().await.map_err(|e| Error::Protocol(format!("{url}: {e}")))?;
    if health.k != k {
        return Err(Error::Config(format!(
            "upstream reports k = {}, patches have k = {k}",
            health.k
        )));
    }
    Ok(())
}

async fn bind(listen: &str) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| Error::Config(format!("cannot listen on {listen}: {e}")))
}

fn spawn(listener: tokio::net::TcpListener, router: Router, counters: Arc<Counters>) -> Result<RunningServer> {
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(RunningServer {
        addr,
        counters,
        shutdown: Some(tx),
        task,
    })
}

/// Loads the patches, checks the upstream and starts serving.
pub async fn start_proxy(config: ProxyConfig) -> Result<RunningServer> {
    let upstream = config
        .upstream
        .clone()
        .ok_or_else(|| Error::Config(format!("no upstream oracle configured (set {ENV_UPSTREAM_URL})")))?;
    if config.patches.is_empty() {
        return Err(Error::Config("at least one patch model is required".into()));
    }
    if config.max_in_flight == 0 || config.request_timeout_ms == 0 {
        return Err(Error::Config(
            "max_in_flight and request_timeout_ms must be positive".into(),
        ));
    }
    let mut patches = Vec::with_capacity(config.patches.len());
    let mut names = Vec::with_capacity(config.patches.len());
    for path in &config.patches {
        let model = MlpModel::load(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        names.push(patch_name(&model, path));
        patches.push(model);
    }
    let k = patches[0].num_classes();
    let input_dim = patches[0].input_dim();
    for (p, path) in patches.iter().zip(&config.patches) {
        if p.num_classes() != k || p.input_dim() != input_dim {
            return Err(Error::Config(format!(
                "{}: patch shape ({} -> {}) differs from ({input_dim} -> {k})",
                path.display(),
                p.input_dim(),
                p.num_classes()
            )));
        }
    }
    let oracle = match upstream {
        Upstream::Url(url) => {
            let remote = RemoteConfig {
                base_url: url,
                ..config.remote.clone()
            };
            probe_upstream(&remote, k).await?;
            OracleHandle::remote(remote, k, config.normalize)?
        }
        Upstream::Model(path) => {
            let model = MlpModel::load(&path)?;
            if model.num_classes() != k || model.input_dim() != input_dim {
                return Err(Error::Config(format!(
                    "{}: deployed model shape does not match the patches",
                    path.display()
                )));
            }
            OracleHandle::local(model)
        }
    };
    let counters = Arc::new(Counters::default());
    let state = Arc::new(ProxyState {
        oracle,
        patches,
        names,
        k,
        input_dim,
        permits: Semaphore::new(config.max_in_flight),
        timeout: Duration::from_millis(config.request_timeout_ms),
        counters: counters.clone(),
    });
    let router = Router::new()
        .route(HEALTH_PATH, get(proxy_health))
        .route(PREDICT_PATH, post(proxy_predict))
        .with_state(state);
    let listener = bind(&config.listen).await?;
    let server = spawn(listener, router, counters)?;
    tracing::info!(addr = %server.addr(), "proxy listening");
    Ok(server)
}

struct OracleState {
    model: MlpModel,
    counters: Arc<Counters>,
}

async fn oracle_health(State(state): State<Arc<OracleState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        k: state.model.num_classes(),
        patches: None,
    })
}

async fn oracle_predict(State(state): State<Arc<OracleState>>, body: Bytes) -> Response {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let inputs = match parse_inputs(&body) {
        Ok(v) => v,
        Err(e) => {
            state.counters.client_errors.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::BAD_REQUEST, "bad_request", e.message, Some(e.field));
        }
    };
    if let Some(resp) = check_dims(&inputs, state.model.input_dim()) {
        state.counters.client_errors.fetch_add(1, Ordering::Relaxed);
        return resp;
    }
    match state.model.forward_batch(&inputs) {
        Ok(probs) => Json(PredictResponse {
            probs: probs.into_iter().map(ProbVector::into_inner).collect(),
        })
        .into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.kind(), e.to_string(), None),
    }
}

/// Serves `model` over the oracle protocol.
pub async fn start_oracle_server(model: MlpModel, listen: &str) -> Result<RunningServer> {
    let counters = Arc::new(Counters::default());
    let state = Arc::new(OracleState {
        model,
        counters: counters.clone(),
    });
    let router = Router::new()
        .route(HEALTH_PATH, get(oracle_health))
        .route(PREDICT_PATH, post(oracle_predict))
        .with_state(state);
    let server = spawn(bind(listen).await?, router, counters)?;
    tracing::info!(addr = %server.addr(), "oracle listening");
    Ok(server)
}
