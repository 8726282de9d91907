//! Session-based HTTP inference API.
//!
//! Frames and masks travel as base64 PNG inside JSON; masks are 8-bit
//! grayscale where values of 128 and above are foreground.

pub mod error;
pub mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use lcvg_core::checkpoint::load_model;
use lcvg_core::control::ControlJson;
use lcvg_core::data::Frame;
use lcvg_core::mask::Mask;
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ErrorBody};
pub use session::{LoadedModel, Session, SessionStore, StepOutput};

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);
pub const DEFAULT_HISTORY: usize = 64;

pub struct AppState {
    pub models: BTreeMap<String, Arc<LoadedModel>>,
    pub sessions: SessionStore,
    pub history_cap: usize,
    pub ttl: Duration,
}

impl AppState {
    pub fn new(models: Vec<LoadedModel>) -> Self {
        AppState {
            models: models.into_iter().map(|m| (m.id.clone(), Arc::new(m))).collect(),
            sessions: SessionStore::default(),
            history_cap: DEFAULT_HISTORY,
            ttl: DEFAULT_TTL,
        }
    }

    /// Loads a checkpoint under `id`, defaulting to the file stem.
    pub fn load(paths: &[(Option<String>, &Path)]) -> lcvg_core::Result<Self> {
        let mut models = Vec::new();
        for (id, path) in paths {
            let (model, meta) = load_model(path)?;
            let id = id.clone().unwrap_or_else(|| {
                path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string()
            });
            models.push(LoadedModel::new(id, meta, model));
        }
        Ok(AppState::new(models))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub height: usize,
    pub width: usize,
    pub stage: u8,
    pub iteration: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub model_id: String,
    /// Base64 PNG.
    pub frame: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub model_id: String,
    pub height: usize,
    pub width: usize,
    pub mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StepResponse {
    pub session_id: String,
    pub step: usize,
    pub frame: String,
    pub mask: String,
    pub control_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionStateResponse {
    pub session_id: String,
    pub model_id: String,
    pub step: usize,
    pub frame: String,
    pub mask: String,
    /// Steps still held in the history ring, oldest first.
    pub history: Vec<usize>,
    pub idle_secs: f64,
}

pub fn encode_frame(f: &Frame) -> String {
    B64.encode(f.encode_png())
}

pub fn encode_mask(m: &Mask) -> String {
    B64.encode(m.encode_png())
}

pub fn decode_frame(b64: &str) -> Result<Frame, ApiError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("frame is not base64: {e}")))?;
    let img = Frame::decode_rgb8(&bytes).map_err(|e| ApiError::bad_request(format!("frame is not a PNG image: {e}")))?;
    Ok(Frame::from_rgb8(&img)?)
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes, what: &str) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed {what}: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("inference task failed: {e}")))
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<Vec<ModelInfo>> {
    Json(
        state
            .models
            .values()
            .map(|m| ModelInfo {
                model_id: m.id.clone(),
                height: m.height(),
                width: m.width(),
                stage: m.meta.stage,
                iteration: m.meta.iteration,
            })
            .collect(),
    )
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<CreateSessionResponse>, ApiError> {
    let req: CreateSessionRequest = parse_json(&body, "session request")?;
    let model = state
        .models
        .get(&req.model_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown model `{}`", req.model_id)))?;
    let frame = decode_frame(&req.frame)?;
    let cap = state.history_cap;
    let session = blocking(move || Session::new(session::new_session_id(), model, frame, cap)).await??;
    let resp = CreateSessionResponse {
        session_id: session.id.clone(),
        model_id: session.model.id.clone(),
        height: session.frame.height(),
        width: session.frame.width(),
        mask: encode_mask(&session.mask),
    };
    state.sessions.insert(session);
    Ok(Json(resp))
}

async fn step_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<StepResponse>, ApiError> {
    let session = state.sessions.get(&id)?;
    let control: ControlJson = parse_json(&body, "control")?;
    let control = control.to_control()?;
    // The per-session lock is held across inference; tokio's mutex is fair, so
    // queued steps run in arrival order.
    let mut guard = session.lock_owned().await;
    let out = blocking(move || guard.step(&control)).await??;
    Ok(Json(StepResponse {
        session_id: id,
        step: out.step,
        frame: encode_frame(&out.frame),
        mask: encode_mask(&out.mask),
        control_mask: encode_mask(&out.control_mask),
        warning: out.warning,
    }))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionStateResponse>, ApiError> {
    let session = state.sessions.get(&id)?;
    let s = session.lock().await;
    Ok(Json(SessionStateResponse {
        session_id: s.id.clone(),
        model_id: s.model.id.clone(),
        step: s.step,
        frame: encode_frame(&s.frame),
        mask: encode_mask(&s.mask),
        history: s.history.iter().map(|h| h.step).collect(),
        idle_secs: s.last_used.elapsed().as_secs_f64(),
    }))
}

async fn delete_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<StatusCode, ApiError> {
    state.sessions.remove(&id)?;
    Ok(StatusCode::OK)
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/models", get(list_models))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/api/v1/sessions/{id}/step", post(step_session))
        .fallback(fallback)
        .with_state(state)
}

/// Periodically drops idle sessions.
pub fn spawn_reaper(state: Arc<AppState>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let n = state.sessions.reap_idle(state.ttl, Instant::now());
            if n > 0 {
                log::info!("reaped {n} idle session(s)");
            }
        }
    })
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let state = Arc::new(state);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let reaper = spawn_reaper(state.clone(), Duration::from_secs(60));
    let app = router(state);
    let res = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    reaper.abort();
    res
}
