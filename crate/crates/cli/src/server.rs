//! HTTP service for interactive supervision and model inspection.
//!
//! Layout under the data root:
//!
//! ```text
//! datasets/<name>/manifest.json   frames (and optional config.json)
//! sessions/<id>/session.json      creation record
//! sessions/<id>/events.jsonl      append-only click/label/finalize log
//! models/<id>/{model,config,meta}.json
//! reports/<dataset>/{yield,metrics}.json
//! ```
//!
//! A session is rebuilt from its log on first access, so a restart loses no
//! supervision. Mutations of one session are serialized; a second concurrent
//! writer gets 409 instead of waiting.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use orchard_core::data_io::{
    append_json_line, load_color_model, load_curves, load_document, load_manifest, load_pipeline_config, load_report,
    read_lines, save_color_model, save_document, save_pipeline_config, DataError, DatasetManifest, DetectionRecord,
};
use orchard_core::detect::{ColorModel, DetectError, FruitLabel, Provenance, SupervisionSession};
use orchard_core::pipeline::PipelineConfig;
use orchard_core::rle::Rle;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::{Mutex, OwnedMutexGuard};
use tracing::info;

use crate::commands::{check_id, detect_one};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug, Error)]
#[error("{message}")]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<DetectError> for ApiError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::UnknownFrame(_) | DetectError::UnknownComponent(_) => Self::not_found(e.to_string()),
            DetectError::Mixture(_) => Self::internal(e.to_string()),
            _ => Self::invalid(e.to_string()),
        }
    }
}

impl From<DataError> for ApiError {
    fn from(e: DataError) -> Self {
        Self::internal(e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// A stored response, replayed for a repeated idempotency key.
#[derive(Debug, Clone)]
struct Reply {
    status: StatusCode,
    body: Value,
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    dataset: String,
    frames: Vec<String>,
    config: PipelineConfig,
    created: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Event {
    Click { frame: String, x: u32, y: u32 },
    Label { component: usize, label: FruitLabel },
    Finalize { provenance: Provenance },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<String>,
    event: Event,
}

struct SessionSlot {
    record: SessionRecord,
    session: SupervisionSession,
    model_id: Option<String>,
    replies: HashMap<String, Reply>,
}

struct StoredModel {
    model: ColorModel,
    config: PipelineConfig,
    dataset: String,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    dataset: String,
    session: String,
}

pub struct AppState {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionSlot>>>>,
    /// Idempotency key of a session creation to the session it created.
    creation_keys: StdMutex<HashMap<String, String>>,
    models: RwLock<HashMap<String, Arc<StoredModel>>>,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn segment(kind: &str, id: &str) -> ApiResult<()> {
    check_id(kind, id).map_err(|e| ApiError::invalid(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn model_id(model: &ColorModel, config: &PipelineConfig) -> ApiResult<String> {
    let bytes = serde_json::to_vec(&(model, config)).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Sha256::digest(&bytes)[..16].iter().map(|b| format!("{b:02x}")).collect())
}

impl SessionSlot {
    fn apply(&mut self, event: &Event, root: &Path) -> ApiResult<Reply> {
        match event {
            Event::Click { frame, x, y } => {
                let outcome = self.session.click_to_cluster(frame, *x, *y)?;
                Ok(Reply {
                    status: StatusCode::OK,
                    body: json!({
                        "component_id": outcome.component,
                        "highlight_mask_rle": Rle::encode(&outcome.highlight),
                    }),
                })
            }
            Event::Label { component, label } => {
                self.session.label_cluster(*component, *label)?;
                Ok(Reply {
                    status: StatusCode::OK,
                    body: json!({
                        "component_id": component,
                        "label": label,
                        "labels": self.labels_json(),
                    }),
                })
            }
            Event::Finalize { provenance } => {
                let model = self.session.finalize_model(*provenance)?;
                let id = model_id(&model, &self.record.config)?;
                let dir = root.join("models").join(&id);
                if !dir.join("meta.json").is_file() {
                    save_color_model(dir.join("model.json"), &model)?;
                    save_pipeline_config(dir.join("config.json"), &self.record.config)?;
                    save_document(
                        dir.join("meta.json"),
                        &ModelMeta {
                            dataset: self.record.dataset.clone(),
                            session: self.record.id.clone(),
                        },
                    )?;
                }
                self.model_id = Some(id.clone());
                Ok(Reply {
                    status: StatusCode::OK,
                    body: json!({
                        "model_id": id,
                        "session_id": self.record.id,
                        "provenance": provenance,
                        "apple_components": model.apple_components().collect::<Vec<_>>(),
                    }),
                })
            }
        }
    }

    fn labels_json(&self) -> Vec<Value> {
        self.session
            .labels()
            .iter()
            .map(|(c, l)| json!({ "component_id": c, "label": l }))
            .collect()
    }

    fn view(&self) -> Value {
        json!({
            "session_id": self.record.id,
            "dataset": self.record.dataset,
            "frames": self.record.frames,
            "components": self.session.mixture().len(),
            "created": self.record.created,
            "state": if self.model_id.is_some() { "finalized" } else { "open" },
            "model_id": self.model_id,
            "labels": self.labels_json(),
            "clicks": self.session.clicks(),
        })
    }

    /// Runs a mutation: replays a stored reply for a known key, refuses
    /// finalized sessions, applies the event and appends it to the log.
    fn mutate(&mut self, root: &Path, key: Option<String>, event: Event) -> ApiResult<Reply> {
        if let Some(reply) = key.as_ref().and_then(|k| self.replies.get(k)) {
            return Ok(reply.clone());
        }
        if let Some(m) = &self.model_id {
            return Err(ApiError::conflict(format!(
                "session {} is finalized (model {m})",
                self.record.id
            )));
        }
        let reply = self.apply(&event, root)?;
        let log = session_dir(root, &self.record.id).join("events.jsonl");
        append_json_line(&log, &LogLine { key: key.clone(), event })?;
        if let Some(k) = key {
            self.replies.insert(k, reply.clone());
        }
        Ok(reply)
    }
}

fn session_dir(root: &Path, id: &str) -> PathBuf {
    root.join("sessions").join(id)
}

fn dataset_manifest(root: &Path, dataset: &str) -> ApiResult<DatasetManifest> {
    segment("dataset", dataset)?;
    let path = root.join("datasets").join(dataset).join("manifest.json");
    if !path.is_file() {
        return Err(ApiError::not_found(format!("dataset {dataset:?} does not exist")));
    }
    Ok(load_manifest(&path)?)
}

fn dataset_config(root: &Path, dataset: &str) -> ApiResult<PipelineConfig> {
    let path = root.join("datasets").join(dataset).join("config.json");
    if path.is_file() {
        Ok(load_pipeline_config(&path)?)
    } else {
        Ok(PipelineConfig::default())
    }
}

fn build_session(root: &Path, record: SessionRecord) -> ApiResult<SessionSlot> {
    let manifest = dataset_manifest(root, &record.dataset)?;
    let frames = record
        .frames
        .iter()
        .map(|id| {
            let entry = manifest
                .frame(id)
                .ok_or_else(|| ApiError::not_found(format!("frame {id:?} is not in dataset {:?}", record.dataset)))?;
            let lab = crate::commands::load_lab(entry).map_err(|e| ApiError::internal(format!("{e:#}")))?;
            Ok((id.clone(), lab))
        })
        .collect::<ApiResult<Vec<_>>>()?;
    let session = SupervisionSession::new(record.dataset.clone(), frames, &record.config.detect)?;
    Ok(SessionSlot {
        record,
        session,
        model_id: None,
        replies: HashMap::new(),
    })
}

fn replay_session(root: &Path, id: &str) -> ApiResult<SessionSlot> {
    let dir = session_dir(root, id);
    let record: SessionRecord = load_document(dir.join("session.json"))?;
    let mut slot = build_session(root, record)?;
    let log = dir.join("events.jsonl");
    let lines: Vec<LogLine> = if log.is_file() { read_lines(&log)? } else { Vec::new() };
    for line in lines {
        let reply = slot
            .apply(&line.event, root)
            .map_err(|e| ApiError::internal(format!("session {id}: log replay failed: {e}")))?;
        if let Some(k) = line.key {
            slot.replies.insert(k, reply);
        }
    }
    Ok(slot)
}

impl AppState {
    /// Opens a data root, indexing the creation keys of stored sessions.
    pub fn open(root: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let root = root.into();
        let mut creation_keys = HashMap::new();
        let sessions = root.join("sessions");
        if sessions.is_dir() {
            for entry in std::fs::read_dir(&sessions)? {
                let path = entry?.path().join("session.json");
                if path.is_file() {
                    let record: SessionRecord = load_document(&path)?;
                    if let Some(k) = record.idempotency_key {
                        creation_keys.insert(k, record.id);
                    }
                }
            }
        }
        Ok(Self {
            root,
            sessions: RwLock::default(),
            creation_keys: StdMutex::new(creation_keys),
            models: RwLock::default(),
        })
    }

    async fn slot(self: &Arc<Self>, id: &str) -> ApiResult<Arc<Mutex<SessionSlot>>> {
        segment("session", id)?;
        if let Some(s) = self.sessions.read().expect("session map poisoned").get(id) {
            return Ok(s.clone());
        }
        if !session_dir(&self.root, id).join("session.json").is_file() {
            return Err(ApiError::not_found(format!("session {id:?} does not exist")));
        }
        let (root, owned) = (self.root.clone(), id.to_string());
        let slot = blocking(move || replay_session(&root, &owned)).await?;
        let mut map = self.sessions.write().expect("session map poisoned");
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(slot)))
            .clone())
    }

    async fn lock_for_write(self: &Arc<Self>, id: &str) -> ApiResult<OwnedMutexGuard<SessionSlot>> {
        self.slot(id)
            .await?
            .try_lock_owned()
            .map_err(|_| ApiError::conflict(format!("session {id:?} is being modified by another request")))
    }

    async fn model(self: &Arc<Self>, id: &str) -> ApiResult<Arc<StoredModel>> {
        segment("model", id)?;
        if let Some(m) = self.models.read().expect("model map poisoned").get(id) {
            return Ok(m.clone());
        }
        let dir = self.root.join("models").join(id);
        if !dir.join("meta.json").is_file() {
            return Err(ApiError::not_found(format!("model {id:?} does not exist")));
        }
        let stored = blocking(move || {
            let meta: ModelMeta = load_document(dir.join("meta.json"))?;
            Ok(StoredModel {
                model: load_color_model(dir.join("model.json"))?,
                config: load_pipeline_config(dir.join("config.json"))?,
                dataset: meta.dataset,
            })
        })
        .await?;
        let mut map = self.models.write().expect("model map poisoned");
        Ok(map.entry(id.to_string()).or_insert_with(|| Arc::new(stored)).clone())
    }
}

fn idempotency_key(headers: &HeaderMap) -> ApiResult<Option<String>> {
    headers
        .get(IDEMPOTENCY_HEADER)
        .map(|v| {
            v.to_str()
                .ok()
                .filter(|s| !s.is_empty() && s.len() <= 200)
                .map(str::to_string)
                .ok_or_else(|| ApiError::invalid("Idempotency-Key must be 1-200 visible characters"))
        })
        .transpose()
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid request body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRange {
    start: usize,
    count: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    dataset: String,
    #[serde(default)]
    frames: Option<Vec<String>>,
    #[serde(default)]
    range: Option<FrameRange>,
    #[serde(default)]
    config: Option<PipelineConfig>,
}

async fn create_session(State(app): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Reply> {
    let key = idempotency_key(&headers)?;
    let req: CreateSession = parse_body(&body)?;
    if let Some(k) = &key {
        let existing = app.creation_keys.lock().expect("key map poisoned").get(k).cloned();
        if let Some(id) = existing {
            let slot = app.slot(&id).await?;
            let view = slot.lock().await.view();
            return Ok(Reply {
                status: StatusCode::CREATED,
                body: view,
            });
        }
    }
    let root = app.root.clone();
    let slot = blocking(move || {
        let manifest = dataset_manifest(&root, &req.dataset)?;
        let frames = match (req.frames, req.range) {
            (Some(_), Some(_)) => return Err(ApiError::invalid("give either frames or range, not both")),
            (Some(f), None) => f,
            (None, Some(r)) => {
                let end = r.start.checked_add(r.count).filter(|&e| e <= manifest.frames.len() && r.count > 0);
                let end = end.ok_or_else(|| {
                    ApiError::invalid(format!("range exceeds the {} frames of the dataset", manifest.frames.len()))
                })?;
                manifest.frames[r.start..end].iter().map(|f| f.id.clone()).collect()
            }
            (None, None) => manifest.frames.iter().map(|f| f.id.clone()).collect(),
        };
        let config = match req.config {
            Some(c) => {
                c.validate().map_err(ApiError::invalid)?;
                c
            }
            None => dataset_config(&root, &req.dataset)?,
        };
        let record = SessionRecord {
            id: uuid::Uuid::new_v4().simple().to_string(),
            dataset: req.dataset,
            frames,
            config,
            created: now_secs(),
            idempotency_key: key,
        };
        build_session(&root, record)
    })
    .await?;

    let id = slot.record.id.clone();
    let view = slot.view();
    let raced = {
        let mut keys = app.creation_keys.lock().expect("key map poisoned");
        match &slot.record.idempotency_key {
            Some(k) if keys.contains_key(k) => keys.get(k).cloned(),
            other => {
                if let Some(k) = other {
                    keys.insert(k.clone(), id.clone());
                }
                save_document(session_dir(&app.root, &id).join("session.json"), &slot.record)?;
                None
            }
        }
    };
    if let Some(existing) = raced {
        let view = app.slot(&existing).await?.lock().await.view();
        return Ok(Reply {
            status: StatusCode::CREATED,
            body: view,
        });
    }
    info!(session = %id, dataset = %slot.record.dataset, frames = slot.record.frames.len(), "session created");
    app.sessions
        .write()
        .expect("session map poisoned")
        .insert(id, Arc::new(Mutex::new(slot)));
    Ok(Reply {
        status: StatusCode::CREATED,
        body: view,
    })
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id).await?;
    let view = slot.lock().await.view();
    Ok(Json(view))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClickBody {
    frame: String,
    x: u32,
    y: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    component_id: usize,
    label: FruitLabel,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FinalizeBody {
    #[serde(default)]
    provenance: Option<Provenance>,
}

async fn mutate(app: Arc<AppState>, id: String, headers: HeaderMap, event: Event) -> ApiResult<Reply> {
    let key = idempotency_key(&headers)?;
    let mut guard = app.lock_for_write(&id).await?;
    let root = app.root.clone();
    blocking(move || guard.mutate(&root, key, event)).await
}

async fn click(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Reply> {
    let b: ClickBody = parse_body(&body)?;
    mutate(app, id, headers, Event::Click { frame: b.frame, x: b.x, y: b.y }).await
}

async fn label(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Reply> {
    let b: LabelBody = parse_body(&body)?;
    mutate(
        app,
        id,
        headers,
        Event::Label {
            component: b.component_id,
            label: b.label,
        },
    )
    .await
}

async fn finalize(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Reply> {
    let b: FinalizeBody = if body.is_empty() { FinalizeBody::default() } else { parse_body(&body)? };
    let provenance = b.provenance.unwrap_or(Provenance::UserSupervised);
    let reply = mutate(app, id.clone(), headers, Event::Finalize { provenance }).await?;
    info!(session = %id, model = %reply.body["model_id"], "session finalized");
    Ok(reply)
}

#[derive(Deserialize)]
struct FrameQuery {
    #[serde(default)]
    dataset: Option<String>,
}

/// Finds a frame by id, across all datasets unless one is named.
fn find_frame(root: &Path, id: &str, dataset: Option<&str>) -> ApiResult<(String, PathBuf)> {
    segment("frame", id)?;
    let names: Vec<String> = match dataset {
        Some(d) => vec![d.to_string()],
        None => {
            let dir = root.join("datasets");
            let mut names = Vec::new();
            if dir.is_dir() {
                for e in std::fs::read_dir(&dir).map_err(|e| ApiError::internal(e.to_string()))? {
                    let e = e.map_err(|e| ApiError::internal(e.to_string()))?;
                    if e.path().join("manifest.json").is_file() {
                        names.push(e.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            names.sort();
            names
        }
    };
    let mut hits = Vec::new();
    for name in names {
        let m = dataset_manifest(root, &name)?;
        if let Some(f) = m.frame(id) {
            hits.push((name, f.path.clone()));
        }
    }
    match hits.len() {
        0 => Err(ApiError::not_found(format!("frame {id:?} does not exist"))),
        1 => Ok(hits.remove(0)),
        _ => Err(ApiError::invalid(format!(
            "frame {id:?} exists in several datasets; pass ?dataset="
        ))),
    }
}

async fn frame_png(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FrameQuery>,
) -> ApiResult<Response> {
    let root = app.root.clone();
    let bytes = blocking(move || {
        let (_, path) = find_frame(&root, &id, q.dataset.as_deref())?;
        std::fs::read(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
struct DetectQuery {
    frame: String,
    #[serde(default)]
    dataset: Option<String>,
}

async fn detect(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<DetectQuery>,
) -> ApiResult<Json<Value>> {
    let stored = app.model(&id).await?;
    let root = app.root.clone();
    blocking(move || {
        let dataset = q.dataset.unwrap_or_else(|| stored.dataset.clone());
        let manifest = dataset_manifest(&root, &dataset)?;
        let entry = manifest
            .frame(&q.frame)
            .ok_or_else(|| ApiError::not_found(format!("frame {:?} is not in dataset {dataset:?}", q.frame)))?;
        let result = detect_one(entry, &stored.model, &stored.config).map_err(|e| match e.downcast::<DetectError>() {
            Ok(d) => ApiError::from(d),
            Err(e) => ApiError::internal(format!("{e:#}")),
        })?;
        let detections: Vec<DetectionRecord> = result.detections.iter().map(DetectionRecord::from).collect();
        Ok(Json(json!({
            "model_id": id,
            "dataset": dataset,
            "frame": q.frame,
            "mask_rle": Rle::encode(&result.mask),
            "detections": detections,
        })))
    })
    .await
}

async fn report(State(app): State<Arc<AppState>>, UrlPath(dataset): UrlPath<String>) -> ApiResult<Json<Value>> {
    segment("dataset", &dataset)?;
    let dir = app.root.join("reports").join(&dataset);
    blocking(move || {
        let yield_path = dir.join("yield.json");
        let metrics_path = dir.join("metrics.json");
        let reports = if yield_path.is_file() { Some(load_report(&yield_path)?) } else { None };
        let curves = if metrics_path.is_file() { Some(load_curves(&metrics_path)?) } else { None };
        if reports.is_none() && curves.is_none() {
            return Err(ApiError::not_found(format!("no reports for dataset {dataset:?}")));
        }
        let mut body = BTreeMap::new();
        body.insert("dataset", json!(dataset));
        body.insert("yield", json!(reports));
        body.insert("metrics", json!(curves));
        Ok(Json(json!(body)))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/click", post(click))
        .route("/v1/sessions/{id}/label", post(label))
        .route("/v1/sessions/{id}/finalize", post(finalize))
        .route("/v1/frames/{id}", get(frame_png))
        .route("/v1/models/{id}/detect", post(detect))
        .route("/v1/reports/{dataset}", get(report))
        .with_state(state)
}

pub async fn serve(root: PathBuf, addr: SocketAddr) -> anyhow::Result<()> {
    let state = Arc::new(AppState::open(root)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_ids_are_content_hashes() {
        use orchard_core::mixture::{Gaussian, MixtureModel};
        let g = |m: f64| Gaussian::isotropic(vec![m, 0.0, 0.0], 4.0).unwrap();
        let mixture = MixtureModel::new(vec![0.5, 0.5], vec![g(50.0), g(20.0)]).unwrap();
        let model = ColorModel::new(mixture, vec![FruitLabel::Apple, FruitLabel::Background], Provenance::UserSupervised)
            .unwrap();
        let cfg = PipelineConfig::default();
        let a = model_id(&model, &cfg).unwrap();
        assert_eq!(a, model_id(&model.clone(), &cfg).unwrap());
        assert_eq!(a.len(), 32);
        assert_ne!(a, model_id(&model, &cfg.clone().with_seed(9)).unwrap());
    }

    #[test]
    fn events_round_trip_through_the_log_format() {
        let line = LogLine {
            key: Some("k1".into()),
            event: Event::Label {
                component: 3,
                label: FruitLabel::Apple,
            },
        };
        let text = serde_json::to_string(&line).unwrap();
        assert_eq!(text, r#"{"key":"k1","event":{"type":"label","component":3,"label":"apple"}}"#);
        let back: LogLine = serde_json::from_str(&text).unwrap();
        assert!(matches!(back.event, Event::Label { component: 3, .. }));
    }

    #[tokio::test]
    async fn concurrent_writer_gets_conflict() {
        use axum::body::Body;
        use axum::http::Request;
        use clap::Parser;
        use tower::ServiceExt;

        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("datasets/tiny");
        let args = ["orchard", "simulate", "--trees", "1", "--fruits-per-tree", "6", "--session-frames", "2", "--out"];
        let cli = crate::commands::Cli::try_parse_from(args.iter().copied().chain([out.to_str().unwrap()])).unwrap();
        crate::commands::run(cli).unwrap();

        let state = Arc::new(AppState::open(tmp.path()).unwrap());
        let app = router(state.clone());
        let post = |uri: String, body: Value| {
            Request::post(uri)
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(body.to_string()))
                .unwrap()
        };
        let res = app
            .clone()
            .oneshot(post("/v1/sessions".into(), json!({"dataset": "tiny", "range": {"start": 0, "count": 2}})))
            .await
            .unwrap();
        assert_eq!(res.status(), StatusCode::CREATED);
        let body: Value = serde_json::from_slice(&axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap()).unwrap();
        let id = body["session_id"].as_str().unwrap().to_string();
        let frame = body["frames"][0].as_str().unwrap().to_string();

        let held = state.lock_for_write(&id).await.unwrap();
        let click = json!({"frame": frame, "x": 3, "y": 3});
        let res = app.clone().oneshot(post(format!("/v1/sessions/{id}/click"), click.clone())).await.unwrap();
        assert_eq!(res.status(), StatusCode::CONFLICT);
        drop(held);
        let res = app.oneshot(post(format!("/v1/sessions/{id}/click"), click)).await.unwrap();
        assert_eq!(res.status(), StatusCode::OK);
    }

    #[test]
    fn idempotency_header_is_validated() {
        let mut h = HeaderMap::new();
        assert_eq!(idempotency_key(&h).unwrap(), None);
        h.insert(IDEMPOTENCY_HEADER, "abc".parse().unwrap());
        assert_eq!(idempotency_key(&h).unwrap().as_deref(), Some("abc"));
        h.insert(IDEMPOTENCY_HEADER, "".parse().unwrap());
        assert_eq!(idempotency_key(&h).unwrap_err().status, StatusCode::UNPROCESSABLE_ENTITY);
    }
}
