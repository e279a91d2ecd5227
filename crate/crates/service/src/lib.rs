//! HTTP+JSON facade over sessions, turns, memory inspection, traces and
//! document summarization.
//!
//! Turns are synchronous: `POST /sessions/{id}/messages` answers after the
//! memory write-back. Each session runs one turn at a time; a second post
//! while one is in flight is refused with 409. Summarization runs as a
//! background job polled through `GET /jobs/{id}`.

pub mod engine;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use scm_core::agent::{Session, TurnError, TurnTrace};
use scm_core::store::{SessionMeta, SessionStore, StoreError};
use scm_core::summarizer::{write_outputs, SummarizeConfig, SummarizeError, SummaryTree, Summarizer};
use scm_core::{Engine, EngineConfig, MemoryItem};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "SCM_DATA_DIR";
pub const BIND_ADDR_ENV: &str = "SCM_BIND_ADDR";
pub const DEFAULT_DATA_DIR: &str = "scm-data";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
const DEFAULT_PAGE_SIZE: usize = 50;
const MAX_PAGE_SIZE: usize = 500;

/// Error body: `{code, message, retryable}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, retryable: bool) -> Self {
        Self {
            status,
            body: ErrorBody { code: code.into(), message: message.into(), retryable },
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message, false)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message, false)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, false)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        let retryable = e.is_retryable();
        match e {
            TurnError::EmptyObservation => Self::new(StatusCode::BAD_REQUEST, "empty_observation", e.to_string(), false),
            TurnError::Config(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string(), false),
            TurnError::Backend(_) => Self::new(StatusCode::BAD_GATEWAY, "backend_error", e.to_string(), retryable),
            TurnError::Embedding(_) => Self::new(StatusCode::BAD_GATEWAY, "embedding_error", e.to_string(), retryable),
            TurnError::Memory(_) | TurnError::Prompt(_) | TurnError::Trace(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => Self::not_found(e.to_string()),
            StoreError::AlreadyExists(_) => Self::new(StatusCode::CONFLICT, "already_exists", e.to_string(), false),
            StoreError::InvalidId(_) => Self::bad_request(e.to_string()),
            StoreError::Turn(t) => t.into(),
            StoreError::Corrupt { .. } | StoreError::Memory(_) | StoreError::Io(_) => Self::internal(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub status: JobStatus,
    pub created_at: u64,
    pub config: SummarizeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<SummaryTree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type SessionSlot = Arc<tokio::sync::Mutex<Session>>;

/// Shared server state: one engine, the on-disk session store, open
/// sessions and summarization jobs.
pub struct AppState {
    engine: Engine,
    store: SessionStore,
    jobs_dir: PathBuf,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    jobs: Mutex<HashMap<String, Job>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>, engine: Engine) -> Arc<Self> {
        let data_dir = data_dir.into();
        Arc::new(Self {
            engine,
            store: SessionStore::new(data_dir.join("sessions")),
            jobs_dir: data_dir.join("jobs"),
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    fn fresh_id(&self, prefix: &str) -> String {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        format!("{prefix}-{nanos:x}-{}", self.counter.fetch_add(1, Ordering::Relaxed))
    }

    /// Open sessions are cached; the first access loads from disk.
    fn session(&self, id: &str) -> Result<SessionSlot, ApiError> {
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(slot) = sessions.get(id) {
            return Ok(slot.clone());
        }
        let (_, session) = self.store.open(id)?;
        let slot = Arc::new(tokio::sync::Mutex::new(session));
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub config: Option<EngineConfig>,
}

/// Parse a JSON body; an empty body reads as `{}`.
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(text).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionMeta>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let id = req.session_id.unwrap_or_else(|| state.fresh_id("s"));
    let config = req.config.unwrap_or_default();
    config
        .validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string(), false))?;
    let mut sessions = state.sessions.lock().unwrap();
    let (meta, session) = state.store.create(&id, config, &state.engine)?;
    sessions.insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(meta)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Result<Json<Vec<String>>, ApiError> {
    Ok(Json(state.store.list()?))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionMeta>, ApiError> {
    Ok(Json(state.store.load_meta(&id)?))
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageReply {
    pub response: String,
    pub turn: usize,
    pub trace_id: String,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageReply>, ApiError> {
    let req: PostMessage = parse_body(&body)?;
    let slot = state.session(&id)?;
    let mut guard = slot.try_lock_owned().map_err(|_| {
        ApiError::new(StatusCode::CONFLICT, "turn_in_flight", format!("session {id} is already running a turn"), true)
    })?;
    let engine = state.engine.clone();
    let outcome = tokio::task::spawn_blocking(move || guard.run_turn(&engine, &req.observation))
        .await
        .map_err(|e| ApiError::internal(format!("turn worker failed: {e}")))?;
    let (response, trace) = outcome?;
    Ok(Json(MessageReply {
        response,
        turn: trace.turn,
        trace_id: format!("{id}/{}", trace.turn),
    }))
}

/// A memory item without its embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub index: usize,
    pub observation: String,
    pub response: String,
    pub observation_summary: String,
    pub response_summary: String,
    pub created_turn: usize,
    pub last_accessed_turn: usize,
    pub token_count_full: usize,
    pub token_count_summary: usize,
    pub embedding_dim: usize,
    pub embedding_norm: f64,
}

impl From<&MemoryItem> for MemoryView {
    fn from(m: &MemoryItem) -> Self {
        Self {
            index: m.index,
            observation: m.observation.clone(),
            response: m.response.clone(),
            observation_summary: m.observation_summary.clone(),
            response_summary: m.response_summary.clone(),
            created_turn: m.created_turn,
            last_accessed_turn: m.last_accessed_turn,
            token_count_full: m.token_count_full,
            token_count_summary: m.token_count_summary,
            embedding_dim: m.embedding.dim(),
            embedding_norm: m.embedding.norm(),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(default)]
    pub page: usize,
    #[serde(default)]
    pub per_page: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPage {
    pub session_id: String,
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
    pub items: Vec<MemoryView>,
}

async fn list_memories(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PageQuery>,
) -> Result<Json<MemoryPage>, ApiError> {
    let per_page = q.per_page.unwrap_or(DEFAULT_PAGE_SIZE);
    if per_page == 0 || per_page > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("per_page must be in 1..={MAX_PAGE_SIZE}")));
    }
    let slot = state.session(&id)?;
    let session = slot.lock().await;
    let items = session.stream().items();
    let start = q.page.saturating_mul(per_page).min(items.len());
    let end = (start + per_page).min(items.len());
    Ok(Json(MemoryPage {
        session_id: id,
        page: q.page,
        per_page,
        total: items.len(),
        items: items[start..end].iter().map(MemoryView::from).collect(),
    }))
}

async fn get_trace(
    State(state): State<Arc<AppState>>,
    Path((id, turn)): Path<(String, usize)>,
) -> Result<Json<TurnTrace>, ApiError> {
    let slot = state.session(&id)?;
    let session = slot.lock().await;
    session
        .trace(turn)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("session {id} has no trace for turn {turn}")))
}

#[derive(Debug, Deserialize)]
pub struct SummarizeRequest {
    pub document: String,
    #[serde(default)]
    pub config: Option<SummarizeConfig>,
}

async fn summarize(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<Job>), ApiError> {
    let req: SummarizeRequest = parse_body(&body)?;
    let config = req.config.unwrap_or_default();
    config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    if req.document.trim().is_empty() {
        return Err(ApiError::bad_request("document is empty"));
    }
    let job = Job {
        job_id: state.fresh_id("job"),
        status: JobStatus::Running,
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config,
        final_summary: None,
        tree: None,
        error: None,
    };
    state.jobs.lock().unwrap().insert(job.job_id.clone(), job.clone());

    let worker = state.clone();
    let job_id = job.job_id.clone();
    tokio::task::spawn_blocking(move || {
        let dir = worker.jobs_dir.join(&job_id);
        let summarizer = Summarizer {
            engine: &worker.engine,
            config,
            policy: scm_core::CallPolicy::default(),
        };
        let result = summarizer
            .hierarchical_summarize(&req.document, Some(&dir.join("checkpoint")))
            .and_then(|run| {
                write_outputs(&dir, &req.document, &run.tree)?;
                Ok::<_, SummarizeError>(run.tree)
            });
        let mut jobs = worker.jobs.lock().unwrap();
        let Some(job) = jobs.get_mut(&job_id) else { return };
        match result {
            Ok(tree) => {
                job.final_summary = Some(tree.root().text.clone());
                job.tree = Some(tree);
                job.status = JobStatus::Done;
            }
            Err(e) => {
                log::error!("summarization job {job_id} failed: {e}");
                job.error = Some(e.to_string());
                job.status = JobStatus::Failed;
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    state
        .jobs
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("job {id} not found")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/memories", get(list_memories))
        .route("/sessions/{id}/traces/{turn}", get(get_trace))
        .route("/summarize", post(summarize))
        .route("/jobs/{id}", get(get_job))
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind_addr: SocketAddr,
}

impl ServiceConfig {
    /// Defaults overridden by `SCM_DATA_DIR` and `SCM_BIND_ADDR`.
    pub fn from_env() -> Result<Self, String> {
        let data_dir = std::env::var(DATA_DIR_ENV).unwrap_or_else(|_| DEFAULT_DATA_DIR.into());
        let bind = std::env::var(BIND_ADDR_ENV).unwrap_or_else(|_| DEFAULT_BIND_ADDR.into());
        Ok(Self {
            data_dir: data_dir.into(),
            bind_addr: bind.parse().map_err(|e| format!("{BIND_ADDR_ENV}={bind:?}: {e}"))?,
        })
    }
}

/// Serve until the process is stopped.
pub async fn serve(config: ServiceConfig, engine: Engine) -> std::io::Result<()> {
    let state = AppState::new(&config.data_dir, engine);
    let listener = tokio::net::TcpListener::bind(config.bind_addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
