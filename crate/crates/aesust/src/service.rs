//! HTTP stylization service.
//!
//! `POST /api/stylize` takes multipart fields `content`, `style` (repeat per
//! style), `weights` (comma separated), `alpha`, `preserve_color` and `mask`
//! (repeat, one per style) and answers with PNG bytes. `GET /api/health` and
//! `GET /api/limits` describe the loaded checkpoint and request limits.

use std::net::SocketAddr;
use std::sync::Arc;

use aesust_core::AesUst;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use tokio::sync::Semaphore;

use crate::request::{self, Limits, RequestError, StylizeRequest};

/// Request bodies above this size get 413.
pub const DEFAULT_BODY_LIMIT: usize = 32 * 1024 * 1024;

pub struct AppState {
    pub model: Arc<AesUst<f32>>,
    /// File name of the loaded checkpoint.
    pub checkpoint: String,
    pub limits: Limits,
    workers: Semaphore,
}

impl AppState {
    pub fn new(model: AesUst<f32>, checkpoint: impl Into<String>, limits: Limits, workers: usize) -> Self {
        AppState {
            model: Arc::new(model),
            checkpoint: checkpoint.into(),
            limits,
            workers: Semaphore::new(workers.max(1)),
        }
    }
}

/// Worker count from `AESUST_THREADS`, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("AESUST_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn router(state: Arc<AppState>, body_limit: usize) -> Router {
    Router::new()
        .route("/api/stylize", post(stylize))
        .route("/api/health", get(health))
        .route("/api/limits", get(limits))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, DEFAULT_BODY_LIMIT)).await
}

#[derive(Serialize)]
struct Widths {
    channel_multiplier: f64,
    encoder: [usize; 5],
    discriminator: [usize; 4],
    stage: u32,
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let m = &st.model;
    let widths = Widths {
        channel_multiplier: m.scale.0,
        encoder: m.encoder.spec.tap_channels(),
        discriminator: m.discriminator.spec.widths(),
        stage: m.stage.number(),
    };
    Json(json!({ "status": "ok", "checkpoint": st.checkpoint, "widths": widths }))
}

async fn limits(State(st): State<Arc<AppState>>) -> Json<Limits> {
    Json(st.limits)
}

pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        let status = match e.status() {
            StatusCode::PAYLOAD_TOO_LARGE => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError {
            status,
            message: e.body_text(),
        }
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        let status = if e.is_client_error() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

fn parse_flag(text: &str) -> Result<bool, ApiError> {
    match text.trim() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" | "" => Ok(false),
        other => Err(ApiError::bad(format!("preserve_color: {other:?} is not a boolean"))),
    }
}

/// Reads the multipart body into a request, rejecting unknown and
/// duplicated scalar fields.
pub async fn read_request(mut mp: Multipart) -> Result<StylizeRequest, ApiError> {
    let mut req = StylizeRequest::default();
    let mut content = None;
    let mut seen_flag = false;
    while let Some(field) = mp.next_field().await? {
        let name = field.name().unwrap_or("").to_string();
        let dup = |n: &str| ApiError::bad(format!("field {n:?} given twice"));
        match name.as_str() {
            "content" => {
                if content.is_some() {
                    return Err(dup("content"));
                }
                content = Some(field.bytes().await?.to_vec());
            }
            "style" => req.styles.push(field.bytes().await?.to_vec()),
            "mask" => req.masks.push(field.bytes().await?.to_vec()),
            "weights" => {
                if req.weights.is_some() {
                    return Err(dup("weights"));
                }
                req.weights = Some(request::parse_weights(&field.text().await?).map_err(|e| ApiError::bad(e.to_string()))?);
            }
            "alpha" => {
                if req.alpha.is_some() {
                    return Err(dup("alpha"));
                }
                let t = field.text().await?;
                let a = t
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| ApiError::bad(format!("alpha: {:?} is not a number", t.trim())))?;
                req.alpha = Some(a);
            }
            "preserve_color" => {
                if seen_flag {
                    return Err(dup("preserve_color"));
                }
                seen_flag = true;
                req.preserve_color = parse_flag(&field.text().await?)?;
            }
            other => return Err(ApiError::bad(format!("unknown field {other:?}"))),
        }
    }
    req.content = content.ok_or_else(|| ApiError::bad("missing field \"content\""))?;
    Ok(req)
}

async fn stylize(State(st): State<Arc<AppState>>, mp: Multipart) -> Result<Response, ApiError> {
    let req = read_request(mp).await?;
    let _permit = st.workers.acquire().await.map_err(|_| ApiError {
        status: StatusCode::SERVICE_UNAVAILABLE,
        message: "service is shutting down".into(),
    })?;
    let model = st.model.clone();
    let limits = st.limits;
    let out = tokio::task::spawn_blocking(move || request::run_request(&model, &req, &limits))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("worker failed: {e}"),
        })??;
    Ok(([(header::CONTENT_TYPE, "image/png")], out).into_response())
}
