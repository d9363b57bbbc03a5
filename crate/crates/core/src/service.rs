//! HTTP facade over [`PlannerEngine`].
//!
//! Routes:
//! - `POST /sessions` with `{"goal": ...}`
//! - `POST /sessions/{id}/messages` with a [`UserMessage`]
//! - `GET /sessions/{id}/plan?version=`
//! - `GET /sessions/{id}/events?from=` as server-sent events
//! - `GET /healthz`
//!
//! The engine is blocking, so every call runs on the blocking pool.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::engine::{EngineError, PlannerEngine, TurnResult, UserMessage};
use crate::store::{SessionId, StoreError, TurnEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApiErrorCode {
    BadRequest,
    NotFound,
    Conflict,
    Busy,
    PolicyFailure,
    Internal,
}

impl ApiErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ApiErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ApiErrorCode::NotFound => StatusCode::NOT_FOUND,
            ApiErrorCode::Conflict => StatusCode::CONFLICT,
            ApiErrorCode::Busy => StatusCode::TOO_MANY_REQUESTS,
            ApiErrorCode::PolicyFailure => StatusCode::UNPROCESSABLE_ENTITY,
            ApiErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ApiErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl ApiError {
    pub fn new(code: ApiErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            details: None,
        }
    }

    fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = Some(details);
        self
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::NotFound(_) => ApiError::new(ApiErrorCode::NotFound, message),
            EngineError::Invalid(_) => ApiError::new(ApiErrorCode::BadRequest, message),
            EngineError::Sequencing { expected, got } => ApiError::new(ApiErrorCode::Conflict, message)
                .with_details(serde_json::json!({"expected_turn_index": expected, "turn_index": got})),
            EngineError::Busy(_) => ApiError::new(ApiErrorCode::Busy, message),
            EngineError::TurnFailed(failure) => ApiError::new(ApiErrorCode::PolicyFailure, message)
                .with_details(serde_json::to_value(failure).unwrap_or_default()),
            EngineError::Store(StoreError::NotFound(_)) => ApiError::new(ApiErrorCode::NotFound, message),
            EngineError::Store(StoreError::Conflict { .. }) => ApiError::new(ApiErrorCode::Conflict, message),
            EngineError::Store(StoreError::UnknownVersion(_)) => ApiError::new(ApiErrorCode::BadRequest, message),
            EngineError::Store(StoreError::Integrity { last_valid_event_id, .. }) => {
                ApiError::new(ApiErrorCode::Internal, message)
                    .with_details(serde_json::json!({"last_valid_event_id": last_valid_event_id}))
            }
            EngineError::Store(StoreError::Io(_)) => ApiError::new(ApiErrorCode::Internal, message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(ApiErrorCode::BadRequest, e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::new(ApiErrorCode::BadRequest, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub goal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: SessionId,
    pub result: TurnResult,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PlanQuery {
    pub version: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct EventsQuery {
    pub from: Option<u64>,
}

#[derive(Clone)]
struct AppState {
    engine: Arc<PlannerEngine>,
    events: broadcast::Sender<TurnEvent>,
    auth_token: Option<Arc<str>>,
}

/// Builds the router and hooks the engine's commit stream into it.
/// With `auth_token` set, every route but `/healthz` requires
/// `Authorization: Bearer <token>`.
pub fn router(engine: Arc<PlannerEngine>, auth_token: Option<String>) -> Router {
    let (events, _) = broadcast::channel(1024);
    let tx = events.clone();
    engine.subscribe(Arc::new(move |batch: &[TurnEvent]| {
        for event in batch {
            // no receivers is fine
            let _ = tx.send(event.clone());
        }
    }));
    let state = AppState {
        engine,
        events,
        auth_token: auth_token.map(Arc::from),
    };
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/plan", get(get_plan))
        .route("/sessions/{id}/events", get(stream_events))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "listening");
    axum::serve(listener, app).await
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let ok = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == &**token);
        if !ok {
            let mut response = ApiError::new(ApiErrorCode::BadRequest, "missing or invalid bearer token").into_response();
            *response.status_mut() = StatusCode::UNAUTHORIZED;
            return response;
        }
    }
    next.run(request).await
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

fn session_id(raw: &str) -> Result<SessionId, ApiError> {
    SessionId::parse(raw).ok_or_else(|| ApiError::new(ApiErrorCode::NotFound, format!("session {raw} not found")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ApiErrorCode::Internal, format!("worker failed: {e}")))?
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let Json(body) = body?;
    let engine = state.engine.clone();
    blocking(move || match engine.create_session(&body.goal) {
        Ok((session_id, result)) => Ok((StatusCode::CREATED, Json(CreateSessionResponse { session_id, result }))),
        Err((session, e)) => {
            let mut err = ApiError::from(e);
            if let Some(id) = session {
                let mut details = err.details.take().unwrap_or_else(|| serde_json::json!({}));
                details["session_id"] = serde_json::json!(id);
                err.details = Some(details);
            }
            Err(err)
        }
    })
    .await
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<UserMessage>, JsonRejection>,
) -> Result<Json<TurnResult>, ApiError> {
    let session = session_id(&id)?;
    let Json(message) = body?;
    let engine = state.engine.clone();
    blocking(move || Ok(Json(engine.post_message(&session, message)?))).await
}

async fn get_plan(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<PlanQuery>, QueryRejection>,
) -> Result<Json<crate::domain::Plan>, ApiError> {
    let session = session_id(&id)?;
    let Query(query) = query?;
    let engine = state.engine.clone();
    blocking(move || Ok(Json(engine.plan(&session, query.version)?))).await
}

fn sse_event(event: &TurnEvent) -> Event {
    Event::default()
        .event(event.kind().as_str())
        .id(event.event_id.to_string())
        .data(event.body.payload_json().to_string())
}

struct Tail {
    engine: Arc<PlannerEngine>,
    session: SessionId,
    rx: broadcast::Receiver<TurnEvent>,
    pending: VecDeque<TurnEvent>,
    last_sent: u64,
}

impl Tail {
    /// Refills `pending` from the log after a gap or a lagged receiver.
    async fn catch_up(&mut self) -> bool {
        let engine = self.engine.clone();
        let session = self.session.clone();
        let from = self.last_sent;
        match tokio::task::spawn_blocking(move || engine.events(&session)).await {
            Ok(Ok(events)) => {
                self.pending.extend(events.into_iter().filter(|e| e.event_id > from));
                true
            }
            _ => false,
        }
    }

    async fn next_event(&mut self) -> Option<TurnEvent> {
        loop {
            if let Some(event) = self.pending.pop_front() {
                if event.event_id <= self.last_sent {
                    continue;
                }
                self.last_sent = event.event_id;
                return Some(event);
            }
            match self.rx.recv().await {
                Ok(event) if event.session_id != self.session || event.event_id <= self.last_sent => {}
                Ok(event) if event.event_id == self.last_sent + 1 => {
                    self.last_sent = event.event_id;
                    return Some(event);
                }
                Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => {
                    if !self.catch_up().await {
                        return None;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }
}

/// Replays events with id >= `from` (or after `Last-Event-ID`), then tails
/// new commits. Each event is delivered once per connection, in order.
async fn stream_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    query: Result<Query<EventsQuery>, QueryRejection>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let session = session_id(&id)?;
    let Query(query) = query?;
    let resume_after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let from = query.from.or(resume_after.map(|id| id + 1)).unwrap_or(1).max(1);

    // subscribe before reading the backlog so no commit falls in between
    let rx = state.events.subscribe();
    let engine = state.engine.clone();
    let s = session.clone();
    let backlog = blocking(move || Ok(engine.events(&s)?)).await?;
    let tail = Tail {
        engine: state.engine.clone(),
        session,
        rx,
        pending: backlog.into_iter().filter(|e| e.event_id >= from).collect(),
        last_sent: from - 1,
    };
    let stream = futures::stream::unfold(tail, |mut tail| async move {
        let event = tail.next_event().await?;
        Some((Ok(sse_event(&event)), tail))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
