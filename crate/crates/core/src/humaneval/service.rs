//! HTTP API for raters.
//!
//! * `GET  /sessions/{id}/next?rater=<rater>` returns a [`NextItem`].
//! * `POST /sessions/{id}/ratings` takes a [`RatingSubmission`] and
//!   answers `201` with the stored [`RatingRecord`].
//! * `GET  /sessions/{id}/report` returns the [`AggregateReport`].
//! * `GET  /healthz` answers `ok`.
//!
//! Errors come back as `{"error": <kind>, "message": <text>}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{EvalSession, HumanEvalError, RatingSubmission, SessionStore};

pub struct ServiceState {
    sessions: Mutex<HashMap<String, EvalSession>>,
    store: Option<SessionStore>,
}

impl ServiceState {
    /// Sessions live only in memory.
    pub fn in_memory(sessions: impl IntoIterator<Item = EvalSession>) -> Self {
        Self {
            sessions: Mutex::new(sessions.into_iter().map(|s| (s.id.clone(), s)).collect()),
            store: None,
        }
    }

    /// Sessions are loaded from and persisted to `store`.
    pub fn persistent(store: SessionStore) -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
            store: Some(store),
        }
    }

    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut EvalSession, Option<&SessionStore>) -> Result<T, HumanEvalError>,
    ) -> Result<T, HumanEvalError> {
        let mut sessions = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        if !sessions.contains_key(id) {
            let store = self
                .store
                .as_ref()
                .ok_or_else(|| HumanEvalError::UnknownSession(id.to_string()))?;
            let loaded = store.load(id)?;
            sessions.insert(id.to_string(), loaded);
        }
        let session = sessions.get_mut(id).expect("session present");
        f(session, self.store.as_ref())
    }
}

pub struct ApiError(HumanEvalError);

impl From<HumanEvalError> for ApiError {
    fn from(e: HumanEvalError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            HumanEvalError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            HumanEvalError::UnknownRater(_) => (StatusCode::FORBIDDEN, "unknown_rater"),
            HumanEvalError::UnknownSlot { .. } => (StatusCode::NOT_FOUND, "unknown_slot"),
            HumanEvalError::OutOfRange { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_range"),
            HumanEvalError::AlreadyRated { .. } => (StatusCode::CONFLICT, "already_rated"),
            HumanEvalError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
            _ => (StatusCode::BAD_REQUEST, "invalid_request"),
        };
        (status, Json(json!({ "error": kind, "message": self.0.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct RaterQuery {
    rater: String,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn next_item(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Query(q): Query<RaterQuery>,
) -> Result<Response, ApiError> {
    let item = state.with_session(&id, |s, _| s.next_item(&q.rater))?;
    Ok(Json(item).into_response())
}

async fn submit(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Json(sub): Json<RatingSubmission>,
) -> Result<Response, ApiError> {
    let record = state.with_session(&id, |s, store| {
        let record = s.check_submission(&sub, now_ms())?;
        if let Some(store) = store {
            store.append(&record)?;
        }
        s.apply(record.clone())?;
        Ok(record)
    })?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn report(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let report = state.with_session(&id, |s, _| Ok(s.aggregate()))?;
    Ok(Json(report).into_response())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/ratings", post(submit))
        .route("/sessions/{id}/report", get(report))
        .with_state(state)
}

/// Serves the API until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<ServiceState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("rating service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
