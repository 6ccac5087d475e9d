//! Station HTTP/JSON API.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lifeline_core::locator::PositionEstimate;
use lifeline_core::{NodeId, ScenarioAction, Session, StationError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, Notify};

/// Session shared between the simulation loop and request handlers. The
/// lock serializes every mutation between simulation steps.
#[derive(Clone)]
pub struct AppState {
    pub session: Arc<Mutex<Session>>,
    /// Woken whenever the event log grows.
    pub events: Arc<Notify>,
    pub long_poll: Duration,
}

impl AppState {
    pub fn new(session: Session) -> Self {
        AppState {
            session: Arc::new(Mutex::new(session)),
            events: Arc::new(Notify::new()),
            long_poll: Duration::from_secs(10),
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    error: String,
    path: String,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, uri: &Uri) -> Self {
        ApiError {
            status,
            error: error.into(),
            path: uri.path().to_string(),
        }
    }

    fn station(e: StationError, uri: &Uri) -> Self {
        let status = match &e {
            StationError::UnknownVictim(_) => StatusCode::NOT_FOUND,
            StationError::EmptyReply => StatusCode::BAD_REQUEST,
            StationError::Forbidden(_) => StatusCode::FORBIDDEN,
            StationError::World(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.to_string(), uri)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.error, "path": self.path})),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/topology", get(topology))
        .route("/api/messages", get(messages))
        .route("/api/victims", get(victims))
        .route("/api/victims/{id}/reply", post(reply))
        .route("/api/estimates/{id}", get(estimate))
        .route("/api/scenario/event", post(scenario_event))
        .route("/api/events", get(events))
        .fallback(not_found)
        .method_not_allowed_fallback(wrong_method)
        .with_state(state)
}

async fn not_found(uri: Uri) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint", &uri)
}

async fn wrong_method(uri: Uri) -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed", &uri)
}

async fn topology(State(s): State<AppState>) -> Json<lifeline_core::station::TopologySnapshot> {
    Json(s.session.lock().await.topology())
}

#[derive(Deserialize)]
struct Since {
    #[serde(default)]
    since: u64,
}

async fn messages(
    State(s): State<AppState>,
    uri: Uri,
) -> ApiResult<Vec<lifeline_core::station::InboxEntry>> {
    let q: Since = query(&uri)?;
    Ok(Json(
        s.session
            .lock()
            .await
            .service()
            .messages_since(q.since)
            .to_vec(),
    ))
}

async fn victims(State(s): State<AppState>) -> Json<Vec<lifeline_core::station::VictimRecord>> {
    Json(s.session.lock().await.victims())
}

fn node_id(raw: &str, uri: &Uri) -> Result<NodeId, ApiError> {
    NodeId::new(raw).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string(), uri))
}

fn query<T: for<'de> Deserialize<'de>>(uri: &Uri) -> Result<T, ApiError> {
    Query::try_from_uri(uri)
        .map(|Query(q)| q)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text(), uri))
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes, uri: &Uri) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string(), uri))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplyBody {
    text: String,
    #[serde(default)]
    token: Option<String>,
}

async fn reply(
    State(s): State<AppState>,
    Path(id): Path<String>,
    uri: Uri,
    body: Bytes,
) -> ApiResult<lifeline_core::station::ReplyOutcome> {
    let victim = node_id(&id, &uri)?;
    let req: ReplyBody = json_body(&body, &uri)?;
    let out = s
        .session
        .lock()
        .await
        .reply(&victim, &req.text, req.token.as_deref())
        .map_err(|e| ApiError::station(e, &uri))?;
    s.events.notify_waiters();
    Ok(Json(out))
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
enum EstimateView {
    Estimated(PositionEstimate),
    Unknown { victim: NodeId },
}

async fn estimate(
    State(s): State<AppState>,
    Path(id): Path<String>,
    uri: Uri,
) -> ApiResult<EstimateView> {
    let victim = node_id(&id, &uri)?;
    let session = s.session.lock().await;
    if session.world().node(&victim).is_none() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown node {victim}"),
            &uri,
        ));
    }
    Ok(Json(match session.estimate(&victim) {
        Some(e) => EstimateView::Estimated(e),
        None => EstimateView::Unknown { victim },
    }))
}

#[derive(Serialize)]
struct Accepted {
    accepted: bool,
    at: f64,
}

async fn scenario_event(State(s): State<AppState>, uri: Uri, body: Bytes) -> ApiResult<Accepted> {
    let action: ScenarioAction = json_body(&body, &uri)?;
    let at = s
        .session
        .lock()
        .await
        .operator_event(action)
        .map_err(|e| ApiError::station(e, &uri))?;
    Ok(Json(Accepted {
        accepted: true,
        at: at.as_secs_f64(),
    }))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: usize,
    timeout_ms: Option<u64>,
}

#[derive(Serialize)]
struct EventsPage {
    /// Pass as `since` on the next request.
    next: usize,
    events: Vec<lifeline_core::LogRecord>,
}

fn page(session: &Session, since: usize) -> EventsPage {
    let log = session.world().log();
    let start = since.min(log.len());
    EventsPage {
        next: log.len(),
        events: log[start..].to_vec(),
    }
}

/// Long-poll: answers at once when records past `since` exist, otherwise
/// waits for new ones up to the timeout.
async fn events(State(s): State<AppState>, uri: Uri) -> ApiResult<EventsPage> {
    let q: EventsQuery = query(&uri)?;
    let timeout = q.timeout_ms.map_or(s.long_poll, Duration::from_millis);
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        let notified = s.events.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        {
            let session = s.session.lock().await;
            let new = session.events_since(q.since);
            if !new.is_empty() || tokio::time::Instant::now() >= deadline {
                return Ok(Json(page(&session, q.since)));
            }
        }
        if tokio::time::timeout_at(deadline, notified).await.is_err() {
            return Ok(Json(page(&*s.session.lock().await, q.since)));
        }
    }
}
