//! HTTP inference endpoint: accepts an image and a mask, returns the
//! inpainted image and predicted landmarks.
//!
//! `POST /v1/inpaint` takes `multipart/form-data` with fields `image`
//! (PNG/JPEG), `mask` (single-channel PNG, 255 = hole) and optional
//! `options` (JSON `{"composite": bool, "return_landmarks": bool}`).
//! `GET /v1/health` reports readiness.
//!
//! The inpaint response body depends only on the request and the loaded
//! checkpoint; wall-clock time goes in the `x-elapsed-ms` header.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use facefill::data::{encode_png, load_image_bytes};
use facefill::inference::InferenceModel;
use facefill::masking::load_segmentation_mask_bytes;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::RwLock;

pub const DEFAULT_MAX_BODY: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Model(#[from] facefill::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub checkpoint: Option<PathBuf>,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { listen: ([127, 0, 0, 1], 8080).into(), checkpoint: None, max_body_bytes: DEFAULT_MAX_BODY }
    }
}

impl ServiceConfig {
    /// Stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Shared server state. Requests hold a read lock for the whole inference,
/// so swapping the model waits for in-flight requests to finish.
pub struct AppState {
    model: Arc<RwLock<Option<InferenceModel>>>,
    started: Instant,
    config_hash: String,
}

impl AppState {
    pub fn new(model: Option<InferenceModel>, config_hash: impl Into<String>) -> Arc<Self> {
        Arc::new(AppState { model: Arc::new(RwLock::new(model)), started: Instant::now(), config_hash: config_hash.into() })
    }

    /// Replaces the model once in-flight requests have finished.
    pub async fn swap_model(&self, model: Option<InferenceModel>) {
        *self.model.write().await = model;
    }
}

pub fn router(state: Arc<AppState>, max_body: usize) -> Router {
    Router::new()
        .route("/v1/inpaint", post(inpaint))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(max_body))
        .with_state(state)
}

/// Loads the configured checkpoint (if any) and builds the router.
pub fn build(cfg: &ServiceConfig) -> Result<(Router, Arc<AppState>), ServiceError> {
    let model = cfg.checkpoint.as_deref().map(InferenceModel::load).transpose()?;
    let state = AppState::new(model, cfg.hash());
    Ok((router(state.clone(), cfg.max_body_bytes), state))
}

/// Serves until interrupted.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let (app, state) = build(&cfg)?;
    let listener = tokio::net::TcpListener::bind(cfg.listen).await.map_err(|source| ServiceError::Bind { addr: cfg.listen, source })?;
    let ready = state.model.read().await.is_some();
    log::info!("listening on {} ({})", cfg.listen, if ready { "ready" } else { "degraded: no checkpoint" });
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: Option<String>,
    pub uptime_s: f64,
    pub config_hash: String,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let model = state.model.read().await;
    Json(Health {
        status: if model.is_some() { "ready" } else { "degraded" }.into(),
        checkpoint_id: model.as_ref().map(|m| m.id().to_string()),
        uptime_s: state.started.elapsed().as_secs_f64(),
        config_hash: state.config_hash.clone(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintOptions {
    pub composite: bool,
    pub return_landmarks: bool,
}

impl Default for InpaintOptions {
    fn default() -> Self {
        InpaintOptions { composite: true, return_landmarks: true }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct InpaintResponse {
    /// Base64 PNG at the working resolution.
    pub image_png: String,
    pub width: usize,
    pub height: usize,
    /// 68 `[x, y]` pairs in output-image pixels.
    pub landmarks: Option<Vec<[f32; 2]>>,
    /// Indices of landmarks outside the output image.
    pub landmarks_out_of_bounds: Vec<usize>,
    /// Output size divided by input size, `[x, y]`.
    pub scale: [f32; 2],
    pub checkpoint_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn fail(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn inpaint(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> Response {
    let start = Instant::now();
    let mut image = None;
    let mut mask = None;
    let mut options = None;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return fail(e.status(), e.body_text()),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) => return fail(e.status(), e.body_text()),
        };
        match name.as_str() {
            "image" => image = Some(bytes),
            "mask" => mask = Some(bytes),
            "options" => options = Some(bytes),
            other => return fail(StatusCode::BAD_REQUEST, format!("unexpected field {other:?}")),
        }
    }
    let (Some(image), Some(mask)) = (image, mask) else {
        return fail(StatusCode::BAD_REQUEST, "fields image and mask are required");
    };
    let opts: InpaintOptions = match options {
        Some(b) => match serde_json::from_slice(&b) {
            Ok(o) => o,
            Err(e) => return fail(StatusCode::BAD_REQUEST, format!("options: {e}")),
        },
        None => InpaintOptions::default(),
    };
    let image = match load_image_bytes(&image, "image") {
        Ok(i) => i,
        Err(e) => return fail(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let mask = match load_segmentation_mask_bytes(&mask, "mask") {
        Ok(m) => m,
        Err(e) => return fail(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return fail(
            StatusCode::BAD_REQUEST,
            format!("image is {}×{} but mask is {}×{}", image.width(), image.height(), mask.width(), mask.height()),
        );
    }
    let guard = state.model.clone().read_owned().await;
    if guard.is_none() {
        return fail(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded");
    }
    let job = tokio::task::spawn_blocking(move || {
        let model = guard.as_ref().expect("checked above");
        let r = model.run(&image, &mask, opts.composite)?;
        let png = encode_png(&r.output)?;
        Ok::<_, facefill::Error>((r, png, model.id().to_string()))
    });
    let (r, png, checkpoint_id) = match job.await {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => return fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => return fail(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")),
    };
    let (w, h) = (r.output.width(), r.output.height());
    let landmarks = if opts.return_landmarks { r.landmarks.as_ref() } else { None };
    let out_of_bounds = landmarks
        .map(|l| {
            l.points()
                .iter()
                .enumerate()
                .filter(|(_, p)| !(p[0] >= 0.0 && p[0] < w as f32 && p[1] >= 0.0 && p[1] < h as f32))
                .map(|(i, _)| i)
                .collect()
        })
        .unwrap_or_default();
    let body = Json(InpaintResponse {
        image_png: base64::engine::general_purpose::STANDARD.encode(png),
        width: w,
        height: h,
        landmarks: landmarks.map(|l| l.points().to_vec()),
        landmarks_out_of_bounds: out_of_bounds,
        scale: r.scale,
        checkpoint_id,
    });
    let elapsed = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    ([("x-elapsed-ms", elapsed)], body).into_response()
}
