//! HTTP service hosting the interactive editing workflow.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use pyrexpose::imaging::{decode_image, encode_png};
use pyrexpose::infer::{correct, Route, DEFAULT_MAX_DIM};
use pyrexpose::model::{Checkpoint, Corrector, ModelConfig};
use pyrexpose::pyramid::ScaleVector;

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 32 << 20;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub max_upload_bytes: usize,
    /// Overrides the scales stored in the checkpoint's model config.
    pub default_scales: Option<ScaleVector>,
}

/// Immutable state shared by all requests.
pub struct AppState {
    model: Corrector<f32>,
    model_id: String,
    default_scales: ScaleVector,
    max_upload_bytes: usize,
}

impl AppState {
    pub fn load(config: &ServiceConfig) -> anyhow::Result<Self> {
        let bytes = std::fs::read(&config.checkpoint)
            .with_context(|| format!("reading {}", config.checkpoint.display()))?;
        let ck = Checkpoint::from_bytes(&bytes, &config.checkpoint)?;
        let mut model = Corrector::new(ck.model.clone(), 0)?;
        model.load_tensors(&ck.tensors)?;
        let n = ck.model.n;
        let default_scales = config.default_scales.clone().unwrap_or_else(|| ck.model.scale_defaults.clone());
        if default_scales.len() != n {
            anyhow::bail!("default scales have {} entries, model has {n} levels", default_scales.len());
        }
        let model_id = format!("sha256:{:x}", Sha256::digest(&bytes));
        Ok(Self {
            model,
            model_id,
            default_scales,
            max_upload_bytes: config.max_upload_bytes,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.model.config()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectRequest {
    pub image: String,
    #[serde(default)]
    pub scales: Option<Vec<f32>>,
    #[serde(default)]
    pub max_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimingsMs {
    pub decode: f64,
    pub resize: f64,
    pub network: f64,
    pub bgu: f64,
    pub encode: f64,
    pub total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrectResponse {
    pub image: String,
    pub timings_ms: TimingsMs,
    pub model_id: String,
    pub route: String,
    pub scales: Vec<f32>,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest { code: &'static str, message: String },
    TooLarge,
    Internal(anyhow::Error),
}

impl ApiError {
    fn bad(code: &'static str, message: impl ToString) -> Self {
        ApiError::BadRequest {
            code,
            message: message.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest { code, message } => {
                (StatusCode::BAD_REQUEST, Json(json!({ "error": code, "message": message }))).into_response()
            }
            ApiError::TooLarge => (
                StatusCode::PAYLOAD_TOO_LARGE,
                Json(json!({ "error": "payload_too_large", "message": "request body exceeds the upload limit" })),
            )
                .into_response(),
            ApiError::Internal(err) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("request {id} failed: {err:#}");
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "internal", "id": id }))).into_response()
            }
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_upload_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model_info))
        .route("/v1/correct", post(correct_handler))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "model_id": state.model_id,
        "config": state.model.config(),
        "default_scales": state.default_scales,
        "num_params": state.model.num_params(),
        "max_dim": DEFAULT_MAX_DIM,
    }))
}

async fn correct_handler(State(state): State<Arc<AppState>>, body: Result<Bytes, axum::extract::rejection::BytesRejection>) -> Result<Json<CorrectResponse>, ApiError> {
    let body = body.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::TooLarge
        } else {
            ApiError::bad("invalid_body", e.body_text())
        }
    })?;
    let req: CorrectRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad("invalid_json", e))?;
    tokio::task::spawn_blocking(move || run_correction(&state, req))
        .await
        .map_err(|e| ApiError::Internal(e.into()))?
        .map(Json)
}

fn run_correction(state: &AppState, req: CorrectRequest) -> Result<CorrectResponse, ApiError> {
    let start = Instant::now();
    let n = state.model.config().n;
    let scales = match req.scales {
        None => state.default_scales.clone(),
        Some(v) if v.len() != n => {
            return Err(ApiError::bad("invalid_scales", format!("expected {n} scales, got {}", v.len())))
        }
        Some(v) => ScaleVector::new(v).map_err(|e| ApiError::bad("invalid_scales", e))?,
    };
    let max_dim = req.max_dim.unwrap_or(DEFAULT_MAX_DIM);
    if max_dim == 0 {
        return Err(ApiError::bad("invalid_max_dim", "max_dim must be positive"));
    }
    let t = Instant::now();
    let png = B64.decode(req.image.as_bytes()).map_err(|e| ApiError::bad("invalid_base64", e))?;
    let img = decode_image(&png).map_err(|e| ApiError::bad("invalid_image", e))?;
    let decode = ms(t);
    let out = correct(&img, &state.model, &scales, max_dim).map_err(|e| ApiError::Internal(e.into()))?;
    let t = Instant::now();
    let encoded = encode_png(&out.image).map_err(|e| ApiError::Internal(e.into()))?;
    let encode = ms(t);
    Ok(CorrectResponse {
        image: B64.encode(encoded),
        timings_ms: TimingsMs {
            decode,
            resize: out.timings.resize_ms,
            network: out.timings.network_ms,
            bgu: out.timings.bgu_ms,
            encode,
            total: ms(start),
        },
        model_id: state.model_id.clone(),
        route: match out.route {
            Route::Direct => "direct",
            Route::Guided => "guided",
        }
        .to_string(),
        scales: scales.values().to_vec(),
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Loads the checkpoint (refusing to start if it is unusable) and serves
/// until the process is stopped.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let state = Arc::new(AppState::load(&config)?);
    log::info!(
        "serving {} ({} parameters) on {}",
        state.model_id,
        state.model.num_params(),
        config.bind
    );
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .with_context(|| format!("binding {}", config.bind))?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}
