//! REST adapter over pipeline sessions.
//!
//! ```text
//! POST /sessions                      multipart {image, config?} -> 201 {id}
//! POST /sessions/{id}/edit            {instruction, k?, idempotency_key?}
//! POST /sessions/{id}/commit          {index, idempotency_key?}
//! GET  /sessions/{id}                 session document + timeline
//! GET  /sessions/{id}/rounds/{n}/overlay.png
//! GET  /artifacts/{sha256}.png
//! GET  /healthz
//! ```
//!
//! Handlers only translate HTTP to [`SessionState`] calls; every state
//! transition lives in the pipeline crate.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cogedit_core::image::{decode_image, render_overlay, BinaryMask, ImageBuf};
use cogedit_core::pipeline::{
    load_session, save_session, Backends, DiverseChoice, EditRecord, PipelineConfig, PipelineError, SessionState,
};
use cogedit_core::prompt::Instruction;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;
use tracing::{info, warn};
use uuid::Uuid;

pub const DEFAULT_MAX_UPLOAD: usize = 32 * 1024 * 1024;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub pipeline: PipelineConfig,
    /// Upload size limit in bytes.
    pub max_upload: usize,
    /// Sessions are saved here after every change and reloaded at startup.
    pub data_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            max_upload: DEFAULT_MAX_UPLOAD,
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

#[derive(Debug)]
pub struct Failure {
    status: StatusCode,
    body: ApiError,
}

impl Failure {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: ApiError {
                error: msg.into(),
                stage: None,
            },
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }

    fn internal(msg: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Stage(_) => StatusCode::BAD_GATEWAY,
            PipelineError::StaleChoice => StatusCode::CONFLICT,
            PipelineError::BadChoice { .. }
            | PipelineError::KTooLarge { .. }
            | PipelineError::KTooSmall(_)
            | PipelineError::DiverseNeedsFull(_)
            | PipelineError::InvalidConfig(_)
            | PipelineError::MissingGtMask
            | PipelineError::EmptyMask { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ApiError {
                error: e.to_string(),
                stage: e.step().map(|s| s.as_str().to_owned()),
            },
        }
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// One live session plus the candidate set awaiting a human choice.
#[derive(Debug)]
pub struct ApiSession {
    pub state: SessionState,
    pub pending: Option<DiverseChoice>,
    replies: HashMap<String, (StatusCode, Value)>,
}

impl ApiSession {
    fn new(state: SessionState) -> Self {
        Self {
            state,
            pending: None,
            replies: HashMap::new(),
        }
    }
}

type Shared = Arc<Mutex<ApiSession>>;

pub struct AppState {
    backends: Backends,
    config: GatewayConfig,
    sessions: RwLock<HashMap<Uuid, Shared>>,
    /// Every PNG any session has produced, by SHA-256.
    artifacts: RwLock<HashMap<String, Arc<Vec<u8>>>>,
}

impl AppState {
    pub fn new(backends: Backends, config: GatewayConfig) -> Arc<Self> {
        Arc::new(Self {
            backends,
            config,
            sessions: RwLock::new(HashMap::new()),
            artifacts: RwLock::new(HashMap::new()),
        })
    }

    /// Loads every session directory under `data_dir`. Unreadable ones are
    /// skipped with a warning.
    pub fn restore(&self) -> std::io::Result<usize> {
        let Some(dir) = &self.config.data_dir else {
            return Ok(0);
        };
        if !dir.exists() {
            return Ok(0);
        }
        let mut n = 0;
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if !path.is_dir() {
                continue;
            }
            match load_session(&path) {
                Ok(state) => {
                    self.index_artifacts(&state, None);
                    self.sessions
                        .write()
                        .expect("session map poisoned")
                        .insert(state.id(), Arc::new(Mutex::new(ApiSession::new(state))));
                    n += 1;
                }
                Err(e) => warn!(path = %path.display(), error = %e, "skipping unreadable session"),
            }
        }
        Ok(n)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    fn session(&self, id: &str) -> Result<Shared, Failure> {
        let uuid = Uuid::parse_str(id).map_err(|_| Failure::not_found(id))?;
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(&uuid)
            .cloned()
            .ok_or_else(|| Failure::not_found(id))
    }

    fn index_artifacts(&self, state: &SessionState, pending: Option<&DiverseChoice>) {
        let mut map = self.artifacts.write().expect("artifact map poisoned");
        let stores = std::iter::once(state.artifacts()).chain(pending.map(|p| p.artifacts()));
        for store in stores {
            for hash in store.hashes() {
                if !map.contains_key(hash) {
                    map.insert(hash.to_owned(), store.get(hash).expect("listed hash"));
                }
            }
        }
    }

    fn persist(&self, state: &SessionState) -> Result<(), Failure> {
        if let Some(dir) = &self.config.data_dir {
            save_session(state, &dir.join(state.id().to_string())).map_err(Failure::internal)?;
        }
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edit", post(edit))
        .route("/sessions/{id}/commit", post(commit))
        .route("/sessions/{id}/rounds/{round}/overlay.png", get(overlay))
        .route("/artifacts/{file}", get(artifact))
        // multipart framing needs a little room beyond the image itself
        .layer(DefaultBodyLimit::max(limit + 64 * 1024))
        .with_state(state)
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

fn merge_config(base: &PipelineConfig, overrides: &[u8]) -> Result<PipelineConfig, Failure> {
    let bad = |e: serde_json::Error| Failure::new(StatusCode::BAD_REQUEST, format!("config: {e}"));
    let patch: Value = serde_json::from_slice(overrides).map_err(bad)?;
    let Value::Object(patch) = patch else {
        return Err(Failure::new(StatusCode::BAD_REQUEST, "config must be a JSON object"));
    };
    let mut merged = serde_json::to_value(base).expect("config serializes");
    merged
        .as_object_mut()
        .expect("config is an object")
        .extend(patch);
    let config: PipelineConfig = serde_json::from_value(merged).map_err(bad)?;
    config
        .validate()
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(config)
}

async fn create_session(State(app): State<Arc<AppState>>, mut form: Multipart) -> Result<Response, Failure> {
    let field_err = |e: axum::extract::multipart::MultipartError| Failure::new(e.status(), e.body_text());
    let mut image: Option<ImageBuf> = None;
    let mut config = app.config.pipeline.clone();
    while let Some(field) = form.next_field().await.map_err(field_err)? {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field.bytes().await.map_err(field_err)?;
        match name.as_str() {
            "image" => {
                if bytes.len() > app.config.max_upload {
                    return Err(Failure::new(
                        StatusCode::PAYLOAD_TOO_LARGE,
                        format!("image exceeds {} bytes", app.config.max_upload),
                    ));
                }
                image = Some(
                    decode_image(&bytes).map_err(|e| Failure::new(StatusCode::BAD_REQUEST, e.to_string()))?,
                );
            }
            "config" => config = merge_config(&app.config.pipeline, &bytes)?,
            other => {
                return Err(Failure::new(
                    StatusCode::BAD_REQUEST,
                    format!("unexpected form field `{other}`"),
                ))
            }
        }
    }
    let image = image.ok_or_else(|| Failure::new(StatusCode::BAD_REQUEST, "missing `image` field"))?;
    let state = SessionState::new(image, config).with_id(Uuid::new_v4());
    let id = state.id();
    app.persist(&state)?;
    app.index_artifacts(&state, None);
    let current = state.current_hash().to_owned();
    app.sessions
        .write()
        .expect("session map poisoned")
        .insert(id, Arc::new(Mutex::new(ApiSession::new(state))));
    info!(%id, "session created");
    Ok((
        StatusCode::CREATED,
        Json(json!({ "id": id, "current_hash": current, "current_url": artifact_url(&current) })),
    )
        .into_response())
}

pub fn artifact_url(hash: &str) -> String {
    format!("/artifacts/{hash}.png")
}

fn record_summary(record: &EditRecord) -> Value {
    json!({
        "round": record.round,
        "instruction": record.instruction.as_str(),
        "localization_prompt": record.localization.selected_prompt,
        "modification_plan": record.modification.selected_plan,
        "selected_by": record.selected_by,
        "selected_seed": record.modification.selected_seed,
        "input_hash": record.input_hash,
        "output_hash": record.output_hash,
        "output_url": artifact_url(&record.output_hash),
    })
}

fn timeline_entry(id: Uuid, record: &EditRecord) -> Value {
    let loc = &record.localization;
    json!({
        "round": record.round,
        "instruction": record.instruction.as_str(),
        "input_url": artifact_url(&record.input_hash),
        "localization_prompt": loc.selected_prompt,
        "mask_url": artifact_url(&loc.mask_hash),
        "raw_mask_url": loc.raw_mask_hash.as_deref().map(artifact_url),
        "mask_overlay_url": format!("/sessions/{id}/rounds/{}/overlay.png", record.round),
        "modification_plan": record.modification.selected_plan,
        "output_url": artifact_url(&record.output_hash),
        "selected_by": record.selected_by,
        "record": record,
    })
}

fn pending_view(choice: &DiverseChoice) -> Value {
    let cards: Vec<Value> = choice
        .candidates
        .iter()
        .enumerate()
        .map(|(position, c)| {
            json!({
                "position": position,
                "candidate_index": c.index,
                "seed": c.seed,
                "score": c.score,
                "output_hash": c.record.output_hash,
                "image_url": artifact_url(&c.record.output_hash),
            })
        })
        .collect();
    json!({ "round": choice.round, "candidates": cards })
}

fn session_view(s: &ApiSession) -> Value {
    let id = s.state.id();
    let timeline: Vec<Value> = s.state.records().iter().map(|r| timeline_entry(id, r)).collect();
    json!({
        "id": id,
        "rounds": s.state.records().len(),
        "initial_url": artifact_url(s.state.initial_hash()),
        "current_hash": s.state.current_hash(),
        "current_url": artifact_url(s.state.current_hash()),
        "pending": s.pending.as_ref().map(pending_view),
        "timeline": timeline,
        "document": s.state.document(),
    })
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, Failure> {
    let shared = app.session(&id)?;
    let s = shared.lock().await;
    Ok(Json(session_view(&s)))
}

#[derive(Debug, Deserialize)]
pub struct EditBody {
    pub instruction: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct CommitBody {
    pub index: usize,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

fn idempotency_key(headers: &HeaderMap, body_key: Option<String>) -> Option<String> {
    headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
        .or(body_key)
}

fn replay(s: &ApiSession, key: &Option<String>) -> Option<Response> {
    let (status, body) = s.replies.get(key.as_ref()?)?;
    Some((*status, Json(body.clone())).into_response())
}

fn remember(s: &mut ApiSession, key: Option<String>, status: StatusCode, body: Value) -> Response {
    if let Some(k) = key {
        s.replies.insert(k, (status, body.clone()));
    }
    (status, Json(body)).into_response()
}

async fn edit(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<EditBody>,
) -> Result<Response, Failure> {
    let shared = app.session(&id)?;
    let key = idempotency_key(&headers, body.idempotency_key);
    let mut guard = shared.lock_owned().await;
    if let Some(r) = replay(&guard, &key) {
        return Ok(r);
    }
    if guard.pending.is_some() {
        return Err(Failure::new(
            StatusCode::CONFLICT,
            "a candidate choice is pending; commit it first",
        ));
    }
    let instruction =
        Instruction::new(body.instruction).map_err(|e| Failure::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let k = body.k.unwrap_or(1);
    if k == 0 {
        return Err(Failure::new(StatusCode::UNPROCESSABLE_ENTITY, "k must be >= 1"));
    }
    let worker = app.clone();
    let (mut guard, reply) = tokio::task::spawn_blocking(move || {
        let s = &mut *guard;
        let reply = if k == 1 {
            s.state
                .edit_once(&instruction, None, &worker.backends)
                .map(|r| json!({ "record": record_summary(r), "pending": false }))
        } else {
            s.state
                .generate_diverse(&instruction, k, &worker.backends)
                .map(|choice| {
                    let view = pending_view(&choice);
                    s.pending = Some(choice);
                    json!({ "pending": true, "round": view["round"], "candidates": view["candidates"] })
                })
        };
        (guard, reply)
    })
    .await
    .map_err(Failure::internal)?;
    let mut reply = reply.map_err(Failure::from)?;
    reply["rounds"] = json!(guard.state.records().len());
    app.index_artifacts(&guard.state, guard.pending.as_ref());
    if k == 1 {
        app.persist(&guard.state)?;
    }
    Ok(remember(&mut guard, key, StatusCode::OK, reply))
}

async fn commit(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<CommitBody>,
) -> Result<Response, Failure> {
    let shared = app.session(&id)?;
    let key = idempotency_key(&headers, body.idempotency_key);
    let mut guard = shared.lock().await;
    if let Some(r) = replay(&guard, &key) {
        return Ok(r);
    }
    let s = &mut *guard;
    let len = match &s.pending {
        None => return Err(Failure::new(StatusCode::CONFLICT, "no candidate choice is pending")),
        Some(p) => p.candidates.len(),
    };
    if body.index >= len {
        return Err(PipelineError::BadChoice { index: body.index, len }.into());
    }
    let choice = s.pending.take().expect("checked above");
    let summary = record_summary(s.state.commit(choice, body.index)?);
    app.persist(&s.state)?;
    let reply = json!({ "record": summary, "rounds": s.state.records().len(), "pending": false });
    Ok(remember(s, key, StatusCode::OK, reply))
}

async fn overlay(
    State(app): State<Arc<AppState>>,
    Path((id, round)): Path<(String, usize)>,
) -> Result<Response, Failure> {
    let shared = app.session(&id)?;
    let (input, mask) = {
        let s = shared.lock().await;
        let record = s
            .state
            .records()
            .get(round)
            .ok_or_else(|| Failure::new(StatusCode::NOT_FOUND, format!("no round {round}")))?;
        let get = |h: &str| {
            s.state
                .artifacts()
                .get(h)
                .ok_or_else(|| Failure::internal(format!("artifact {h} missing")))
        };
        (get(&record.input_hash)?, get(&record.localization.mask_hash)?)
    };
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, Failure> {
        let image = decode_image(&input).map_err(Failure::internal)?;
        let mask = cogedit_core::image::decode_mask(&mask, cogedit_core::image::DEFAULT_MASK_THRESHOLD)
            .map_err(Failure::internal)?;
        overlay_png(&image, &mask)
    })
    .await
    .map_err(Failure::internal)??;
    Ok(png_response(png))
}

fn overlay_png(image: &ImageBuf, mask: &BinaryMask) -> Result<Vec<u8>, Failure> {
    render_overlay(image, mask)
        .and_then(|o| o.to_png())
        .map_err(Failure::internal)
}

fn png_response(bytes: Vec<u8>) -> Response {
    (
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response()
}

async fn artifact(State(app): State<Arc<AppState>>, Path(file): Path<String>) -> Result<Response, Failure> {
    let hash = file
        .strip_suffix(".png")
        .ok_or_else(|| Failure::new(StatusCode::NOT_FOUND, "artifacts are served as <sha256>.png"))?;
    let bytes = app
        .artifacts
        .read()
        .expect("artifact map poisoned")
        .get(hash)
        .cloned()
        .ok_or_else(|| Failure::new(StatusCode::NOT_FOUND, format!("no artifact {hash}")))?;
    Ok(png_response(bytes.as_ref().clone()))
}
