use std::path::PathBuf;
use std::time::Duration;

use axum::routing::{get, post};
use axum::{Json, Router};
use eraser_core::nnet::{Activation, MlpModel, ModelRole, OutputMode};
use eraser_core::proxy::{start_oracle_server, start_proxy, ProxyConfig, RunningServer, Upstream};
use eraser_core::wire::{ErrorBody, HealthResponse, PredictRequest, PredictResponse, ProxyResponse};
use eraser_core::{erase_multi, Error};

struct Fixture {
    _dir: tempfile::TempDir,
    deployed: PathBuf,
    patches: Vec<PathBuf>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let deployed = dir.path().join("deployed.json");
    MlpModel::new(&[4, 8, 2], Activation::Relu, OutputMode::Softmax, 1)
        .unwrap()
        .save(&deployed)
        .unwrap();
    let patches = ["race", "gender"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut m = MlpModel::new(&[4, 4, 2], Activation::Tanh, OutputMode::Softmax, 10 + i as u64).unwrap();
            m.metadata.role = Some(ModelRole::Patch);
            m.metadata.bias_attr = Some(name.to_string());
            let path = dir.path().join(format!("patch_{name}.json"));
            m.save(&path).unwrap();
            path
        })
        .collect();
    Fixture {
        _dir: dir,
        deployed,
        patches,
    }
}

fn proxy_config(f: &Fixture, upstream: Upstream) -> ProxyConfig {
    ProxyConfig {
        listen: "127.0.0.1:0".into(),
        upstream: Some(upstream),
        patches: f.patches.clone(),
        ..ProxyConfig::default()
    }
}

async fn post_json(client: &reqwest::Client, server: &RunningServer, body: &str) -> (u16, serde_json::Value) {
    let resp = client
        .post(format!("{}/v1/predict", server.base_url()))
        .header("content-type", "application/json")
        .body(body.to_string())
        .send()
        .await
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn local_upstream_matches_library() {
    let f = fixture();
    let server = start_proxy(proxy_config(&f, Upstream::Model(f.deployed.clone())))
        .await
        .unwrap();
    let client = reqwest::Client::new();
    let health: HealthResponse = client
        .get(format!("{}/health", server.base_url()))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!(health.k, 2);
    assert_eq!(health.patches, Some(vec!["race".to_string(), "gender".to_string()]));

    let inputs = vec![vec![0.5, -1.0, 0.25, 2.0], vec![0.0; 4], vec![-3.0, 1.0, 1.0, 0.5]];
    let (status, body) = post_json(
        &client,
        &server,
        &serde_json::to_string(&PredictRequest { inputs: inputs.clone() }).unwrap(),
    )
    .await;
    assert_eq!(status, 200);
    let resp: ProxyResponse = serde_json::from_value(body).unwrap();
    let deployed = MlpModel::load(&f.deployed).unwrap();
    let patches: Vec<MlpModel> = f.patches.iter().map(|p| MlpModel::load(p).unwrap()).collect();
    for (i, x) in inputs.iter().enumerate() {
        let raw = deployed.forward_probs(x).unwrap();
        let rules: Vec<_> = patches.iter().map(|g| g.forward_probs(x).unwrap()).collect();
        let fair = erase_multi(&raw, &rules).unwrap();
        assert_eq!(resp.raw[i], raw.as_slice());
        assert_eq!(resp.fair[i], fair.as_slice());
        assert_eq!(resp.argmax_fair[i], fair.argmax());
    }
    server.shutdown(Duration::from_secs(2)).await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn client_errors_carry_status_and_field() {
    let f = fixture();
    let server = start_proxy(proxy_config(&f, Upstream::Model(f.deployed.clone())))
        .await
        .unwrap();
    let client = reqwest::Client::new();

    let (status, body) = post_json(&client, &server, r#"{"inputs": [[1, 2, 3, 4], [1, "a", 3, 4]]}"#).await;
    assert_eq!(status, 400);
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!(err.field.as_deref(), Some("inputs[1][1]"));

    let (status, body) = post_json(&client, &server, r#"{"inputs": [[1, 2, 3, 4], [1, 2]]}"#).await;
    assert_eq!(status, 422);
    assert_eq!(body["field"], "inputs[1]");

    let (status, _) = post_json(&client, &server, "not json").await;
    assert_eq!(status, 400);
    let counters = server.counters();
    assert_eq!((counters.requests, counters.client_errors), (3, 3));
    server.shutdown(Duration::from_secs(2)).await.unwrap();
}

async fn serve(router: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}")
}

/// Healthy upstream that answers predictions after `delay`.
fn slow_upstream(delay: Duration) -> Router {
    Router::new()
        .route(
            "/health",
            get(|| async {
                Json(HealthResponse {
                    status: "ok".into(),
                    k: 2,
                    patches: None,
                })
            }),
        )
        .route(
            "/v1/predict",
            post(move |Json(req): Json<PredictRequest>| async move {
                tokio::time::sleep(delay).await;
                Json(PredictResponse {
                    probs: vec![vec![0.5, 0.5]; req.inputs.len()],
                })
            }),
        )
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn backpressure_and_timeouts() {
    let f = fixture();
    let url = serve(slow_upstream(Duration::from_millis(400))).await;
    let cfg = ProxyConfig {
        max_in_flight: 1,
        request_timeout_ms: 5_000,
        ..proxy_config(&f, Upstream::Url(url.clone()))
    };
    let server = start_proxy(cfg).await.unwrap();
    let client = reqwest::Client::new();
    let body = r#"{"inputs": [[1, 2, 3, 4]]}"#;
    let first = post_json(&client, &server, body);
    let second = async {
        tokio::time::sleep(Duration::from_millis(100)).await;
        post_json(&client, &server, body).await
    };
    let ((s1, _), (s2, b2)) = tokio::join!(first, second);
    assert_eq!((s1, s2), (200, 429));
    assert_eq!(b2["error"], "busy");
    assert_eq!(server.counters().rejected, 1);
    server.shutdown(Duration::from_secs(2)).await.unwrap();

    let cfg = ProxyConfig {
        request_timeout_ms: 50,
        ..proxy_config(&f, Upstream::Url(url))
    };
    let server = start_proxy(cfg).await.unwrap();
    let (status, _) = post_json(&client, &server, body).await;
    assert_eq!(status, 504);
    server.shutdown(Duration::from_secs(2)).await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn upstream_failure_is_bad_gateway() {
    let f = fixture();
    let upstream = start_oracle_server(MlpModel::load(&f.deployed).unwrap(), "127.0.0.1:0")
        .await
        .unwrap();
    let mut cfg = proxy_config(&f, Upstream::Url(upstream.base_url()));
    cfg.remote.retries = 0;
    let server = start_proxy(cfg).await.unwrap();
    upstream.shutdown(Duration::from_secs(2)).await.unwrap();
    let client = reqwest::Client::new();
    let (status, body) = post_json(&client, &server, r#"{"inputs": [[1, 2, 3, 4]]}"#).await;
    assert_eq!(status, 502);
    assert_eq!(body["error"], "upstream_unavailable");
    server.shutdown(Duration::from_secs(2)).await.unwrap();
}

#[tokio::test]
async fn startup_checks() {
    let f = fixture();
    // Unreachable upstream fails the startup probe.
    let err = start_proxy(proxy_config(&f, Upstream::Url("http://127.0.0.1:9".into())))
        .await
        .err()
        .unwrap();
    assert!(matches!(err, Error::UpstreamUnavailable { .. }), "{err}");

    // Patches must agree with the deployed model on k.
    let three = MlpModel::new(&[4, 3], Activation::Relu, OutputMode::Softmax, 0).unwrap();
    let bad = f.patches[0].with_file_name("three.json");
    three.save(&bad).unwrap();
    let mut cfg = proxy_config(&f, Upstream::Model(f.deployed.clone()));
    cfg.patches.push(bad);
    assert!(matches!(start_proxy(cfg).await, Err(Error::Config(_))));

    let upstream = start_oracle_server(three, "127.0.0.1:0").await.unwrap();
    let cfg = proxy_config(&f, Upstream::Url(upstream.base_url()));
    assert!(matches!(start_proxy(cfg).await, Err(Error::Config(_))));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_drains_in_flight_requests() {
    let f = fixture();
    let url = serve(slow_upstream(Duration::from_millis(300))).await;
    let server = start_proxy(proxy_config(&f, Upstream::Url(url))).await.unwrap();
    let base = server.base_url();
    let pending = tokio::spawn(async move {
        reqwest::Client::new()
            .post(format!("{base}/v1/predict"))
            .json(&PredictRequest {
                inputs: vec![vec![0.0; 4]],
            })
            .send()
            .await
            .map(|r| r.status().as_u16())
    });
    tokio::time::sleep(Duration::from_millis(100)).await;
    server.shutdown(Duration::from_secs(5)).await.unwrap();
    assert_eq!(pending.await.unwrap().unwrap(), 200);
}
