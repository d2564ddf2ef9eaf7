use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use pyrexpose::imaging::{decode_image, encode_png, synthetic};
use pyrexpose::model::{Checkpoint, Corrector, ModelConfig};
use pyrexpose_cli::service::{router, AppState, ServiceConfig};

fn write_checkpoint(dir: &Path) -> std::path::PathBuf {
    let model = Corrector::<f32>::new(ModelConfig::tiny(), 11).unwrap();
    let path = dir.join("tiny.ckpt");
    Checkpoint {
        model: model.config().clone(),
        discriminator: None,
        training: None,
        tensors: model.named_tensors(),
    }
    .save(&path)
    .unwrap();
    path
}

fn config(checkpoint: std::path::PathBuf, max_upload_bytes: usize) -> ServiceConfig {
    ServiceConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        checkpoint,
        max_upload_bytes,
        default_scales: None,
    }
}

fn app(max_upload_bytes: usize) -> (tempfile::TempDir, axum::Router) {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path());
    let state = AppState::load(&config(ck, max_upload_bytes)).unwrap();
    (dir, router(Arc::new(state)))
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(body: impl Into<Body>) -> Request<Body> {
    Request::post("/v1/correct")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap()
}

fn png_b64(h: usize, w: usize, seed: u64) -> String {
    B64.encode(encode_png(&synthetic::scene(h, w, seed)).unwrap())
}

#[tokio::test]
async fn health_reports_ok() {
    let (_dir, app) = app(1 << 20);
    let (status, body) = call(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "status": "ok" }));
}

#[tokio::test]
async fn model_info_is_stable() {
    let (_dir, app) = app(1 << 20);
    let (status, a) = call(&app, get("/v1/model")).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, get("/v1/model")).await;
    assert_eq!(a, b);
    assert!(a["model_id"].as_str().unwrap().starts_with("sha256:"));
    assert_eq!(a["config"]["n"], 4);
    let scales: Vec<f64> = serde_json::from_value(a["default_scales"].clone()).unwrap();
    let expected = [1.8, 1.8, 1.8, 1.12];
    assert!(scales.iter().zip(expected).all(|(s, e)| (s - e).abs() < 1e-6));
}

#[tokio::test]
async fn correct_uses_default_scales_and_is_deterministic() {
    let (_dir, app) = app(1 << 20);
    let body = json!({ "image": png_b64(30, 41, 2) }).to_string();
    let (status, a) = call(&app, post(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{a}");
    let (_, b) = call(&app, post(body)).await;
    assert_eq!(a["image"], b["image"]);
    assert_eq!(a["route"], "direct");
    let scales: Vec<f64> = serde_json::from_value(a["scales"].clone()).unwrap();
    assert!((scales[3] - 1.12).abs() < 1e-6 && (scales[0] - 1.8).abs() < 1e-6);
    let out = decode_image(&B64.decode(a["image"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(out.dims(), (30, 41));
    for key in ["decode", "network", "encode", "total"] {
        assert!(a["timings_ms"][key].as_f64().unwrap() >= 0.0);
    }
    let (_, info) = call(&app, get("/v1/model")).await;
    assert_eq!(a["model_id"], info["model_id"]);
}

#[tokio::test]
async fn explicit_scales_and_guided_route() {
    let (_dir, app) = app(1 << 20);
    let img = png_b64(70, 90, 3);
    let (status, a) = call(
        &app,
        post(json!({ "image": img, "scales": [1.0, 1.0, 1.0, 1.0], "max_dim": 32 }).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{a}");
    assert_eq!(a["route"], "guided");
    let (_, b) = call(&app, post(json!({ "image": img, "max_dim": 32 }).to_string())).await;
    assert_ne!(a["image"], b["image"]);
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let (_dir, app) = app(1 << 20);
    let body = json!({ "image": png_b64(24, 24, 5) }).to_string();
    let (a, b) = tokio::join!(call(&app, post(body.clone())), call(&app, post(body)));
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.1["image"], b.1["image"]);
}

#[tokio::test]
async fn malformed_requests_get_codes() {
    let (_dir, app) = app(1 << 20);
    let cases = [
        ("{not json".to_string(), "invalid_json"),
        (json!({ "image": "%%%" }).to_string(), "invalid_base64"),
        (json!({ "image": B64.encode(b"hello") }).to_string(), "invalid_image"),
        (json!({ "image": png_b64(16, 16, 0), "scales": [1.0, 1.0] }).to_string(), "invalid_scales"),
        (json!({ "image": png_b64(16, 16, 0), "scales": [1.0, -1.0, 1.0, 1.0] }).to_string(), "invalid_scales"),
        (json!({ "image": png_b64(16, 16, 0), "max_dim": 0 }).to_string(), "invalid_max_dim"),
    ];
    for (body, code) in cases {
        let (status, resp) = call(&app, post(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{code}");
        assert_eq!(resp["error"], code);
    }
}

#[tokio::test]
async fn oversize_upload_rejected() {
    let (_dir, app) = app(2048);
    let body = json!({ "image": png_b64(64, 64, 1) }).to_string();
    assert!(body.len() > 2048);
    let (status, resp) = call(&app, post(body)).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(resp["error"], "payload_too_large");
}

#[test]
fn refuses_to_start_without_valid_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    assert!(AppState::load(&config(missing, 1024)).is_err());
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"PYRXgarbage").unwrap();
    assert!(AppState::load(&config(bad, 1024)).is_err());
    let ck = write_checkpoint(dir.path());
    let mut cfg = config(ck, 1024);
    cfg.default_scales = Some(pyrexpose::pyramid::ScaleVector::ones(3));
    assert!(AppState::load(&cfg).is_err());
}
