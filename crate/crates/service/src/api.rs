//! HTTP and WebSocket routes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use promp_core::io::ProMPFile;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tower_http::cors::CorsLayer;

use crate::session::{
    ConfigPatch, CreateRequest, Event, HistoryEntry, Session, SessionError, Sessions, Snapshot, TrajectoryPoint,
    DEFAULT_ENVELOPE_SAMPLES, MAX_ENVELOPE_SAMPLES, PAYLOAD_VERSION,
};

pub type AppState = Arc<Sessions>;

/// JSON error body `{version, error, message}` with the matching status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn unprocessable(message: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, code: "invalid_input", message: message.into() }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::NotFound(id) => {
                Self { status: StatusCode::NOT_FOUND, code: "not_found", message: format!("no session {id}") }
            }
            SessionError::Invalid { code, message } => Self { status: StatusCode::UNPROCESSABLE_ENTITY, code, message },
            SessionError::Busy => Self {
                status: StatusCode::TOO_MANY_REQUESTS,
                code: "queue_full",
                message: "too many pending updates for this session".into(),
            },
            SessionError::Numerical { code, message } => {
                Self { status: StatusCode::INTERNAL_SERVER_ERROR, code, message }
            }
            SessionError::Storage(message) => {
                Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "storage_error", message }
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::unprocessable(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::unprocessable(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "version": PAYLOAD_VERSION, "error": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoRequest {
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Debug, Deserialize)]
pub struct EnvelopeQuery {
    pub samples: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SessionView<'a> {
    version: u32,
    session_id: &'a str,
    created_at: f64,
    updated_at: f64,
    n: u64,
    delta: f64,
    minibatch_size: usize,
    buffered: usize,
    has_reference: bool,
    #[serde(flatten)]
    promp: ProMPFile,
    envelope: Vec<crate::session::EnvelopePoint>,
}

fn session_view(session: &Session, snap: &Snapshot) -> Value {
    let view = SessionView {
        version: PAYLOAD_VERSION,
        session_id: &session.id,
        created_at: session.created_at,
        updated_at: snap.updated_at,
        n: snap.state.n,
        delta: snap.state.delta,
        minibatch_size: session.minibatch_size(),
        buffered: snap.buffered,
        has_reference: session.reference.is_some(),
        promp: ProMPFile::from_state(&snap.state, &snap.config),
        envelope: snap.envelope(DEFAULT_ENVELOPE_SAMPLES),
    };
    serde_json::to_value(view).expect("session view serializes")
}

pub fn router(state: AppState) -> Router {
    let cors = state.config().cors_origin.as_deref().and_then(|o| HeaderValue::from_str(o).ok()).map(|origin| {
        CorsLayer::new()
            .allow_origin(origin)
            .allow_methods([Method::GET, Method::POST, Method::PATCH, Method::DELETE])
            .allow_headers([axum::http::header::CONTENT_TYPE])
    });
    let router = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/demos", post(add_demo))
        .route("/sessions/{id}/envelope", get(get_envelope))
        .route("/sessions/{id}/history", get(get_history))
        .route("/sessions/{id}/reset", post(reset_session))
        .route("/sessions/{id}/config", axum::routing::patch(patch_config))
        .route("/sessions/{id}/ws", get(stream))
        .with_state(state);
    match cors {
        Some(layer) => router.layer(layer),
        None => router,
    }
}

async fn create_session(State(sessions): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let request: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("invalid session request: {e}")))?
    };
    let session = sessions.create(request).await?;
    Ok((StatusCode::CREATED, Json(session_view(&session, &session.snapshot()))))
}

async fn list_sessions(State(sessions): State<AppState>) -> Json<Value> {
    Json(json!({ "version": PAYLOAD_VERSION, "sessions": sessions.ids() }))
}

async fn get_session(State(sessions): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = sessions.get(&id)?;
    Ok(Json(session_view(&session, &session.snapshot())))
}

async fn delete_session(State(sessions): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    sessions.remove(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn add_demo(
    State(sessions): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<DemoRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let session = sessions.get(&id)?;
    let Json(request) = body?;
    let d = session.snapshot().state.params.basis.d;
    let demo = crate::session::resample(&request.points, d)?;
    let outcome = session.add_demo(demo).await?;
    let snap = &outcome.snapshot;
    Ok(Json(json!({
        "version": PAYLOAD_VERSION,
        "session_id": session.id,
        "applied": outcome.applied,
        "n": snap.state.n,
        "delta_used": outcome.delta_used,
        "buffered": snap.buffered,
        "envelope": snap.envelope(DEFAULT_ENVELOPE_SAMPLES),
        "metrics": outcome.metrics,
    })))
}

async fn get_envelope(
    State(sessions): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<EnvelopeQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let session = sessions.get(&id)?;
    let Query(query) = query?;
    let samples = query.samples.unwrap_or(DEFAULT_ENVELOPE_SAMPLES);
    if !(2..=MAX_ENVELOPE_SAMPLES).contains(&samples) {
        return Err(ApiError::unprocessable(format!("samples must lie in [2, {MAX_ENVELOPE_SAMPLES}], got {samples}")));
    }
    let snap = session.snapshot();
    Ok(Json(json!({ "version": PAYLOAD_VERSION, "n": snap.state.n, "points": snap.envelope(samples) })))
}

async fn get_history(State(sessions): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = sessions.get(&id)?;
    let snap = session.snapshot();
    let entries: Vec<&HistoryEntry> = snap.history.iter().collect();
    Ok(Json(json!({ "version": PAYLOAD_VERSION, "n": snap.state.n, "entries": entries })))
}

async fn reset_session(State(sessions): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = sessions.get(&id)?;
    let snap = session.reset().await?;
    Ok(Json(session_view(&session, &snap)))
}

async fn patch_config(
    State(sessions): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ConfigPatch>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let session = sessions.get(&id)?;
    let Json(patch) = body?;
    let snap = session.patch_config(patch).await?;
    Ok(Json(session_view(&session, &snap)))
}

async fn stream(
    State(sessions): State<AppState>,
    Path(id): Path<String>,
    upgrade: WebSocketUpgrade,
) -> ApiResult<Response> {
    let session = sessions.get(&id)?;
    // Subscribe before the handshake completes so no update after it is missed.
    let events = session.subscribe();
    Ok(upgrade.on_upgrade(move |socket| pump(socket, events)))
}

async fn pump(socket: WebSocket, mut events: broadcast::Receiver<Event>) {
    let (mut tx, mut rx) = socket.split();
    loop {
        tokio::select! {
            event = events.recv() => match event {
                Ok(Event::Update(body)) => {
                    if tx.send(Message::Text(body.to_string().into())).await.is_err() {
                        break;
                    }
                }
                Ok(Event::Closed) | Err(broadcast::error::RecvError::Closed) => {
                    let _ = tx.send(Message::Close(None)).await;
                    break;
                }
                Err(broadcast::error::RecvError::Lagged(_)) => {}
            },
            incoming = rx.next() => match incoming {
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
