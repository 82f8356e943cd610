//! Black-box access to a deployed classifier.
//!
//! An [`OracleHandle`] answers batches of feature vectors with probability
//! vectors, either from an in-process [`MlpModel`] or from a remote HTTP
//! endpoint speaking the [`crate::wire`] protocol. Nothing downstream can see
//! model parameters through a handle.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nnet::MlpModel;
use crate::prob::{ProbVector, SUM_TOLERANCE};
use crate::wire::{PredictRequest, PredictResponse, PREDICT_PATH};

pub const ENV_ORACLE_URL: &str = "ERASER_ORACLE_URL";
pub const ENV_ORACLE_TIMEOUT_MS: &str = "ERASER_ORACLE_TIMEOUT_MS";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizePolicy {
    /// Reject responses whose rows do not sum to one within 1e-6.
    Strict,
    /// Divide every row by its sum.
    #[default]
    Renormalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// Inputs per HTTP request.
    pub chunk_size: usize,
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            timeout_ms: 10_000,
            retries: 3,
            max_in_flight: 8,
            chunk_size: 256,
            backoff_ms: 50,
        }
    }
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            ..Self::default()
        }
    }

    /// Applies `ERASER_ORACLE_URL` and `ERASER_ORACLE_TIMEOUT_MS` when set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(url) = std::env::var(ENV_ORACLE_URL) {
            self.base_url = url;
        }
        if let Ok(ms) = std::env::var(ENV_ORACLE_TIMEOUT_MS) {
            self.timeout_ms = ms
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_ORACLE_TIMEOUT_MS}='{ms}' is not an integer")))?;
        }
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() {
            return Err(Error::Config("oracle base_url is empty".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("oracle timeout must be positive".into()));
        }
        if self.max_in_flight == 0 || self.chunk_size == 0 {
            return Err(Error::Config("max_in_flight and chunk_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
enum OracleKind {
    Local(Arc<MlpModel>),
    Remote {
        config: RemoteConfig,
        client: reqwest::Client,
    },
}

type Cache = Arc<Mutex<HashMap<Vec<u64>, ProbVector>>>;

#[derive(Clone)]
pub struct OracleHandle {
    kind: OracleKind,
    k: usize,
    policy: NormalizePolicy,
    cache: Option<Cache>,
    id: String,
}

impl std::fmt::Debug for OracleHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleHandle")
            .field("id", &self.id)
            .field("k", &self.k)
            .field("policy", &self.policy)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

/// Probabilities for one batch plus wall-clock latency.
#[derive(Debug, Clone)]
pub struct OracleResponse {
    pub probs: Vec<ProbVector>,
    pub latency_ms: f64,
}

impl OracleHandle {
    pub fn local(model: MlpModel) -> Self {
        Self::local_shared(Arc::new(model))
    }

    pub fn local_shared(model: Arc<MlpModel>) -> Self {
        let digest = Sha256::digest(model.to_json_bytes());
        Self {
            k: model.num_classes(),
            kind: OracleKind::Local(model),
            policy: NormalizePolicy::Renormalize,
            cache: None,
            id: format!("local:{}", &hex::encode(digest)[..16]),
        }
    }

    pub fn remote(config: RemoteConfig, k: usize, policy: NormalizePolicy) -> Result<Self> {
        config.validate()?;
        if k < 2 {
            return Err(Error::Config(format!("oracle needs k >= 2, got {k}")));
        }
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            id: format!("remote:{}", config.base_url),
            kind: OracleKind::Remote { config, client },
            k,
            policy,
            cache: None,
        })
    }

    /// Memoizes answers by the exact bit pattern of each feature vector.
    pub fn with_cache(mut self) -> Self {
        self.cache = Some(Arc::default());
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn policy(&self) -> NormalizePolicy {
        self.policy
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.kind, OracleKind::Remote { .. })
    }

    /// Blocking batch query. Output order matches input order.
    ///
    /// Remote handles drive their own runtime; inside an async context use
    /// [`OracleHandle::query_batch_async`] instead of paying for a helper thread.
    pub fn query_batch<F: AsRef<[f64]> + Sync>(&self, features: &[F]) -> Result<Vec<ProbVector>> {
        if let OracleKind::Local(model) = &self.kind {
            if self.cache.is_none() {
                return model.forward_batch(features);
            }
        }
        let run = || {
            tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(Error::Io)?
                .block_on(self.query_batch_async(features))
        };
        if tokio::runtime::Handle::try_current().is_ok() {
            std::thread::scope(|s| s.spawn(run).join().expect("oracle query thread panicked"))
        } else {
            run()
        }
    }

    pub fn query_timed<F: AsRef<[f64]> + Sync>(&self, features: &[F]) -> Result<OracleResponse> {
        let start = Instant::now();
        let probs = self.query_batch(features)?;
        Ok(OracleResponse {
            probs,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub async fn query_batch_async<F: AsRef<[f64]>>(&self, features: &[F]) -> Result<Vec<ProbVector>> {
        let Some(cache) = &self.cache else {
            return self.query_uncached(features).await;
        };
        let keys: Vec<Vec<u64>> = features
            .iter()
            .map(|x| x.as_ref().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut out: Vec<Option<ProbVector>> = {
            let guard = cache.lock().expect("oracle cache poisoned");
            keys.iter().map(|k| guard.get(k).cloned()).collect()
        };
        let missing: Vec<usize> = (0..out.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<&[f64]> = missing.iter().map(|&i| features[i].as_ref()).collect();
            let fresh = self.query_uncached(&batch).await?;
            let mut guard = cache.lock().expect("oracle cache poisoned");
            for (&i, p) in missing.iter().zip(fresh) {
                guard.insert(keys[i].clone(), p.clone());
                out[i] = Some(p);
            }
        }
        Ok(out.into_iter().map(|p| p.expect("filled above")).collect())
    }

    async fn query_uncached<F: AsRef<[f64]>>(&self, features: &[F]) -> Result<Vec<ProbVector>> {
        match &self.kind {
            OracleKind::Local(model) => model.forward_batch(features),
            OracleKind::Remote { config, client } => {
                let chunks: Vec<Vec<Vec<f64>>> = features
                    .chunks(config.chunk_size)
                    .map(|c| c.iter().map(|x| x.as_ref().to_vec()).collect())
                    .collect();
                let url = format!("{}{PREDICT_PATH}", config.base_url.trim_end_matches('/'));
                let answers: Vec<Vec<ProbVector>> = stream::iter(chunks)
                    .map(|inputs| post_with_retries(client, &url, config, inputs, self))
                    .buffered(config.max_in_flight)
                    .try_collect()
                    .await?;
                Ok(answers.into_iter().flatten().collect())
            }
        }
    }

    /// Applies the normalization policy to one raw response row.
    pub fn normalize_row(&self, row: &[f64]) -> Result<ProbVector> {
        if let Some(bad) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Protocol(format!("invalid probability {bad}")));
        }
        if row.len() == 1 && self.k == 2 {
            return ProbVector::from_sigmoid_scores(row).map_err(|e| Error::Protocol(e.to_string()));
        }
        if row.len() != self.k {
            return Err(Error::Protocol(format!(
                "expected {} probabilities per row, got {} (label-only responses are not supported)",
                self.k,
                row.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        match self.policy {
            NormalizePolicy::Strict if (sum - 1.0).abs() > SUM_TOLERANCE => Err(Error::Protocol(format!(
                "row sums to {sum}, strict policy requires 1 +/- {SUM_TOLERANCE}"
            ))),
            NormalizePolicy::Strict => ProbVector::new(row.to_vec()).map_err(|e| Error::Protocol(e.to_string())),
            NormalizePolicy::Renormalize => {
                ProbVector::from_unnormalized(row.to_vec()).map_err(|e| Error::Protocol(e.to_string()))
            }
        }
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

async fn post_once(client: &reqwest::Client, url: &str, body: &PredictRequest) -> Result<PredictResponse, Attempt> {
    let resp = client
        .post(url)
        .json(body)
        .send()
        .await
        .map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
    let status = resp.status();
    if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
        return Err(Attempt::Retry(format!("upstream status {status}")));
    }
    let bytes = resp
        .bytes()
        .await
        .map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
    if !status.is_success() {
        let text = String::from_utf8_lossy(&bytes);
        return Err(Attempt::Fatal(Error::Protocol(format!(
            "upstream status {status}: {text}"
        ))));
    }
    serde_json::from_slice(&bytes)
        .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed oracle response: {e}"))))
}

async fn post_with_retries(
    client: &reqwest::Client,
    url: &str,
    config: &RemoteConfig,
    inputs: Vec<Vec<f64>>,
    handle: &OracleHandle,
) -> Result<Vec<ProbVector>> {
    let expected = inputs.len();
    let body = PredictRequest { inputs };
    let attempts = config.retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let wait = config.backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
            tokio::time::sleep(Duration::from_millis(wait)).await;
        }
        match post_once(client, url, &body).await {
            Ok(resp) => {
                if resp.probs.len() != expected {
                    return Err(Error::Protocol(format!(
                        "sent {expected} inputs, received {} rows",
                        resp.probs.len()
                    )));
                }
                return resp.probs.iter().map(|row| handle.normalize_row(row)).collect();
            }
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(msg)) => {
                tracing::debug!(attempt, %msg, "oracle request failed");
                last = msg;
            }
        }
    }
    Err(Error::UpstreamUnavailable {
        attempts,
        message: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Activation, OutputMode};

    fn remote(policy: NormalizePolicy, k: usize) -> OracleHandle {
        OracleHandle::remote(RemoteConfig::new("http://127.0.0.1:9"), k, policy).unwrap()
    }

    #[test]
    fn local_matches_forward_probs() {
        let model = MlpModel::new(&[3, 5, 2], Activation::Relu, OutputMode::Softmax, 4).unwrap();
        let xs = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.5]];
        let oracle = OracleHandle::local(model.clone());
        let out = oracle.query_batch(&xs).unwrap();
        for (x, p) in xs.iter().zip(&out) {
            assert_eq!(p, &model.forward_probs(x).unwrap());
        }
        let cached = oracle.with_cache();
        assert_eq!(cached.query_batch(&xs).unwrap(), out);
        assert_eq!(cached.query_batch(&xs).unwrap(), out);
        assert!(oracle_id_is_stable(&model));
    }

    fn oracle_id_is_stable(model: &MlpModel) -> bool {
        OracleHandle::local(model.clone()).id() == OracleHandle::local(model.clone()).id()
    }

    #[test]
    fn local_shape_errors_propagate() {
        let model = MlpModel::new(&[3, 2], Activation::Relu, OutputMode::Softmax, 4).unwrap();
        assert!(OracleHandle::local(model).query_batch(&[vec![1.0]]).is_err());
    }

    #[test]
    fn normalization_policies() {
        let renorm = remote(NormalizePolicy::Renormalize, 2);
        assert_eq!(renorm.normalize_row(&[0.3, 0.7]).unwrap().as_slice(), &[0.3, 0.7]);
        let p = renorm.normalize_row(&[0.49, 0.49]).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-15));

        let strict = remote(NormalizePolicy::Strict, 2);
        assert!(matches!(strict.normalize_row(&[0.49, 0.49]), Err(Error::Protocol(_))));
        assert!(strict.normalize_row(&[0.3, 0.7]).is_ok());
        assert!(strict.normalize_row(&[0.3, 0.7000005]).is_ok());
    }

    #[test]
    fn sigmoid_and_label_only_rows() {
        let oracle = remote(NormalizePolicy::Strict, 2);
        let p = oracle.normalize_row(&[0.8]).unwrap();
        assert!((p.as_slice()[1] - 0.8).abs() < 1e-15);

        let three = remote(NormalizePolicy::Renormalize, 3);
        assert!(three.normalize_row(&[1.0]).is_err());
        assert!(three.normalize_row(&[0.5, 0.5]).is_err());
        assert!(three.normalize_row(&[0.5, f64::NAN, 0.1]).is_err());
        assert!(three.normalize_row(&[0.9, 0.6, 0.5]).is_ok());
    }

    #[test]
    fn remote_config_validation() {
        assert!(OracleHandle::remote(RemoteConfig::default(), 2, NormalizePolicy::Strict).is_err());
        let zero = RemoteConfig {
            timeout_ms: 0,
            ..RemoteConfig::new("http://x")
        };
        assert!(OracleHandle::remote(zero, 2, NormalizePolicy::Strict).is_err());
        assert!(OracleHandle::remote(RemoteConfig::new("http://x"), 1, NormalizePolicy::Strict).is_err());
    }

    #[test]
    fn unreachable_remote_reports_attempts() {
        let config = RemoteConfig {
            retries: 1,
            backoff_ms: 1,
            timeout_ms: 500,
            ..RemoteConfig::new("http://127.0.0.1:9")
        };
        let oracle = OracleHandle::remote(config, 2, NormalizePolicy::Strict).unwrap();
        match oracle.query_batch(&[vec![1.0]]) {
            Err(Error::UpstreamUnavailable { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
