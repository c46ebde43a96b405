//! HTTP front end.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /v1/sessions` | new session, returns `{session_id}` |
//! | `POST /v1/sessions/{id}/messages` | run one turn for `{text}` |
//! | `GET /v1/sessions/{id}/trace?turn=N` | trace events of turn N (default: latest) |
//! | `GET /v1/sessions/{id}/events` | server-sent trace events of turns as they run |
//! | `GET /v1/sessions/{id}/artifacts/{path}` | a file from the session workspace |
//! | `GET /v1/tools`, `GET /v1/tools/{name}` | tool listing and parameter detail |
//!
//! A session runs one turn at a time; a second message while a turn is in
//! flight gets 409.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::orchestrator::{Orchestrator, SessionState, TraceEvent, Turn, TurnError};
use crate::selection::{enumerate_instructions, query_parameters};

const EVENT_BUFFER: usize = 256;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Trace(TraceEvent),
    TurnComplete { turn_id: usize, aborted: bool },
}

struct Slot {
    state: Mutex<SessionState>,
    busy: AtomicBool,
    turns: RwLock<Vec<Turn>>,
    workspace: PathBuf,
    events: broadcast::Sender<StreamEvent>,
}

struct BusyGuard(Arc<Slot>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::SeqCst);
    }
}

pub struct AppState {
    orch: Arc<Orchestrator>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(orch: Arc<Orchestrator>, static_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            orch,
            sessions: RwLock::new(HashMap::new()),
            static_dir,
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session '{id}'")))
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/trace", get(get_trace))
        .route("/v1/sessions/{id}/events", get(events))
        .route("/v1/sessions/{id}/artifacts/{*path}", get(artifact))
        .route("/v1/tools", get(list_tools))
        .route("/v1/tools/{name}", get(tool_detail))
        .fallback(get(static_file))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn create_session(State(st): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let session = st.orch.new_session().map_err(internal)?;
    let id = session.session_id.clone();
    let (events, _) = broadcast::channel(EVENT_BUFFER);
    let slot = Slot {
        workspace: session.workspace.clone(),
        state: Mutex::new(session),
        busy: AtomicBool::new(false),
        turns: RwLock::new(Vec::new()),
        events,
    };
    st.sessions
        .write()
        .expect("sessions lock")
        .insert(id.clone(), Arc::new(slot));
    Ok(Json(json!({"session_id": id})))
}

#[derive(Debug, Deserialize)]
pub struct MessageBody {
    pub text: String,
}

fn turn_json(turn: &Turn, reason: Option<&str>) -> Value {
    let calls: Vec<Value> = turn
        .calls
        .iter()
        .map(|c| {
            json!({
                "call_id": c.call.call_id,
                "tool": c.call.tool,
                "arguments": c.call.arguments,
                "status": c.result.status,
                "duration_ms": c.result.duration_ms,
                "artifacts": c.result.artifacts,
            })
        })
        .collect();
    let mut body = json!({
        "turn_id": turn.turn_id,
        "response": turn.response,
        "aborted": turn.aborted,
        "calls": calls,
    });
    if let Some(r) = reason {
        body["reason"] = json!(r);
    }
    body
}

async fn post_message(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let slot = st.slot(&id)?;
    let Json(body) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    if body.text.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "text must not be empty".into()));
    }
    if slot
        .busy
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(ApiError(
            StatusCode::CONFLICT,
            "a turn is already in flight for this session".into(),
        ));
    }
    let guard = BusyGuard(Arc::clone(&slot));
    let orch = Arc::clone(&st.orch);
    let outcome = tokio::task::spawn_blocking(move || {
        let slot = Arc::clone(&guard.0);
        let mut session = slot.state.lock().unwrap_or_else(|p| p.into_inner());
        let tx = slot.events.clone();
        let sink = move |e: &TraceEvent| {
            let _ = tx.send(StreamEvent::Trace(e.clone()));
        };
        let result = orch.handle_turn(&mut session, &body.text, &sink);
        *slot.turns.write().expect("turns lock") = session.turns.clone();
        if let Some(last) = session.turns.last() {
            let _ = slot.events.send(StreamEvent::TurnComplete {
                turn_id: last.turn_id,
                aborted: last.aborted,
            });
        }
        drop(guard);
        result
    })
    .await
    .map_err(internal)?;
    match outcome {
        Ok(turn) => Ok(Json(turn_json(&turn, None))),
        Err(TurnError::ExecutionAborted { reason, turn }) => Ok(Json(turn_json(&turn, Some(&reason)))),
        Err(e @ TurnError::EmptyInput) => Err(ApiError(StatusCode::BAD_REQUEST, e.to_string())),
        Err(e @ TurnError::PlannerUnavailable { .. }) => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, e.to_string())),
        Err(e @ TurnError::PlanningFailed { .. }) => Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
        Err(e) => Err(internal(e)),
    }
}

#[derive(Debug, Deserialize)]
pub struct TraceQuery {
    pub turn: Option<usize>,
}

async fn get_trace(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    query: Result<Query<TraceQuery>, QueryRejection>,
) -> Result<Json<Vec<TraceEvent>>, ApiError> {
    let slot = st.slot(&id)?;
    let Query(q) = query.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    let turns = slot.turns.read().expect("turns lock");
    let turn = match q.turn {
        Some(n) => n.checked_sub(1).and_then(|i| turns.get(i)),
        None => turns.last(),
    };
    turn.map(|t| Json(t.trace.clone()))
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no such turn".into()))
}

async fn events(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = st.slot(&id)?.events.subscribe();
    let stream = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(msg) => {
                    let name = match &msg {
                        StreamEvent::Trace(_) => "trace",
                        StreamEvent::TurnComplete { .. } => "turn_complete",
                    };
                    let data = match &msg {
                        StreamEvent::Trace(ev) => serde_json::to_string(ev),
                        other => serde_json::to_string(other),
                    }
                    .unwrap_or_default();
                    return Some((Ok(Event::default().event(name).data(data)), rx));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or_default() {
        "wav" => "audio/wav",
        "json" => "application/json",
        "txt" => "text/plain; charset=utf-8",
        "png" => "image/png",
        "mp4" => "video/mp4",
        "html" => "text/html; charset=utf-8",
        "js" => "text/javascript",
        "css" => "text/css",
        "svg" => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// Reads `rel` under `root`, refusing anything that leaves it.
fn read_contained(root: &FsPath, rel: &str) -> Result<(PathBuf, Vec<u8>), ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no file '{rel}'"));
    let rel_path = FsPath::new(rel);
    if rel.is_empty() || !rel_path.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(not_found());
    }
    let root = root.canonicalize().map_err(|_| not_found())?;
    let full = root.join(rel_path).canonicalize().map_err(|_| not_found())?;
    if !full.starts_with(&root) || !full.is_file() {
        return Err(not_found());
    }
    let bytes = std::fs::read(&full).map_err(internal)?;
    Ok((full, bytes))
}

async fn artifact(
    State(st): State<Arc<AppState>>,
    Path((id, path)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let slot = st.slot(&id)?;
    let (full, bytes) = read_contained(&slot.workspace, &path)?;
    Ok(([(header::CONTENT_TYPE, content_type(&full))], bytes).into_response())
}

async fn list_tools(State(st): State<Arc<AppState>>) -> Json<Value> {
    let listing = enumerate_instructions(st.orch.registry());
    let reg = st.orch.registry();
    let tools: Vec<Value> = listing
        .entries
        .iter()
        .map(|e| {
            let t = reg.get(&e.name).expect("listed tools exist");
            json!({
                "name": e.name,
                "instruction": e.instruction,
                "modality": t.modality,
                "category": t.category,
            })
        })
        .collect();
    Json(json!({"entries": tools, "token_estimate": listing.token_estimate}))
}

async fn tool_detail(State(st): State<Arc<AppState>>, Path(name): Path<String>) -> Result<Json<Value>, ApiError> {
    let detail =
        query_parameters(st.orch.registry(), &name).map_err(|e| ApiError(StatusCode::NOT_FOUND, e.to_string()))?;
    Ok(Json(serde_json::to_value(detail).map_err(internal)?))
}

async fn static_file(State(st): State<Arc<AppState>>, uri: Uri) -> Result<Response, ApiError> {
    let Some(dir) = &st.static_dir else {
        return Err(ApiError(StatusCode::NOT_FOUND, "not found".into()));
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let (full, bytes) = read_contained(dir, rel)?;
    Ok(([(header::CONTENT_TYPE, content_type(&full))], bytes).into_response())
}
