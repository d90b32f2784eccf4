//! HTTP API for the operator console.
//!
//! | method | path | body / query | reply |
//! |---|---|---|---|
//! | GET | `/sessions` | | `[SessionRecord]` |
//! | GET | `/sessions/{id}/graph` | | `SessionSnapshot` |
//! | GET | `/sessions/{id}/events` | `?since=seq&wait_ms=n` | `[SessionEvent]` with seq > since |
//! | GET | `/sessions/{id}/pending` | | `[OperatorRequest]` |
//! | POST | `/sessions/{id}/tasks/{tid}/result` | `{"result", "success_hint"?}` | `{"task_id", "accepted"}` |
//! | POST | `/sessions/{id}/tasks/{tid}/approve` | | `{"task_id", "accepted"}` |
//! | POST | `/sessions/{id}/abort` | | `{"session_id", "aborted"}` |
//!
//! `events` long-polls when `wait_ms` is set: it answers as soon as a newer
//! event exists, or with `[]` after the wait. Errors are `{"error": message}`
//! with 404 for an unknown session or task, 409 for a task that is not
//! waiting for that kind of input and 400/422 for a body that does not parse.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use breachgraph_core::events::{SessionEvent, SessionSnapshot};
use breachgraph_core::phase_pipeline::{OperatorReply, OperatorRequest, SubmitError};
use breachgraph_core::task_graph::TaskId;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::registry::{Registry, SessionHandle, SessionRecord};

/// Longest a single events request may block.
pub const MAX_WAIT_MS: u64 = 30_000;

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}/graph", get(graph))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/pending", get(pending))
        .route("/sessions/{id}/tasks/{tid}/result", post(submit_result))
        .route("/sessions/{id}/tasks/{tid}/approve", post(approve))
        .route("/sessions/{id}/abort", post(abort))
        .with_state(registry)
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn session(registry: &Registry, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
    registry
        .get(id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session {id}")))
}

async fn list_sessions(State(registry): State<Arc<Registry>>) -> Json<Vec<SessionRecord>> {
    Json(registry.list())
}

async fn graph(State(registry): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Json<SessionSnapshot>, ApiError> {
    Ok(Json(session(&registry, &id)?.journal.snapshot()))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    wait_ms: u64,
}

async fn events(
    State(registry): State<Arc<Registry>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Json<Vec<SessionEvent>>, ApiError> {
    let journal = session(&registry, &id)?.journal.clone();
    if q.wait_ms == 0 {
        return Ok(Json(journal.events_since(q.since)));
    }
    let wait = Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    let events = tokio::task::spawn_blocking(move || journal.wait_since(q.since, wait))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(events))
}

async fn pending(
    State(registry): State<Arc<Registry>>,
    Path(id): Path<String>,
) -> Result<Json<Vec<OperatorRequest>>, ApiError> {
    Ok(Json(session(&registry, &id)?.bridge.pending()))
}

fn submit_error(session: &SessionHandle, task_id: TaskId, err: SubmitError) -> ApiError {
    let known = session
        .journal
        .snapshot()
        .graph
        .is_some_and(|g| g.get(task_id).is_some());
    match err {
        SubmitError::NotPending(_) if !known => ApiError(StatusCode::NOT_FOUND, format!("unknown task {task_id}")),
        other => ApiError(StatusCode::CONFLICT, other.to_string()),
    }
}

async fn submit_result(
    State(registry): State<Arc<Registry>>,
    Path((id, task_id)): Path<(String, TaskId)>,
    body: Result<Json<OperatorReply>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let session = session(&registry, &id)?;
    let Json(reply) = body.map_err(|e| ApiError(e.status(), e.body_text()))?;
    session
        .bridge
        .submit_result(task_id, reply)
        .map_err(|e| submit_error(&session, task_id, e))?;
    Ok(Json(json!({"task_id": task_id, "accepted": true})))
}

async fn approve(
    State(registry): State<Arc<Registry>>,
    Path((id, task_id)): Path<(String, TaskId)>,
) -> Result<Json<Value>, ApiError> {
    let session = session(&registry, &id)?;
    session
        .bridge
        .approve(task_id)
        .map_err(|e| submit_error(&session, task_id, e))?;
    Ok(Json(json!({"task_id": task_id, "accepted": true})))
}

async fn abort(State(registry): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = session(&registry, &id)?;
    session.bridge.abort();
    Ok(Json(json!({"session_id": id, "aborted": true})))
}
