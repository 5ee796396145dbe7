//! Versioned HTTP JSON API.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use ringwatch_core::attribute::{RawRegistrationEvent, UserId};
use ringwatch_core::detector::ClusterId;
use serde::Deserialize;
use serde_json::json;

use crate::review::QueueOrigin;
use crate::service::{DecisionError, DecisionRequest, IngestError, Service};

pub type SharedService = Arc<RwLock<Service>>;

#[derive(Clone)]
struct AppState {
    svc: SharedService,
    token: Option<Arc<str>>,
}

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

pub fn router(svc: SharedService) -> Router {
    let token = svc.read().config().reviewer_token.as_deref().map(Arc::from);
    Router::new()
        .route("/v1/registrations", post(post_registration))
        .route("/v1/users/{id}/cluster", get(get_user_cluster))
        .route("/v1/review/queue", get(get_queue))
        .route("/v1/clusters/{id}", get(get_cluster))
        .route("/v1/review/{cluster_id}/decision", post(post_decision))
        .route("/v1/metrics", get(get_metrics))
        .with_state(AppState { svc, token })
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), Response> {
    let Some(expected) = &state.token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(&**expected) {
        Ok(())
    } else {
        Err(error(StatusCode::UNAUTHORIZED, "missing or invalid reviewer token"))
    }
}

fn user_id(raw: u64) -> Result<UserId, Response> {
    UserId::new(raw).ok_or_else(|| error(StatusCode::BAD_REQUEST, "user ids start at 1"))
}

async fn post_registration(State(state): State<AppState>, body: Bytes) -> Response {
    let event: RawRegistrationEvent = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => {
            let reason = format!("unreadable event: {e}");
            state.svc.write().poison(&reason, &String::from_utf8_lossy(&body));
            return error(StatusCode::UNPROCESSABLE_ENTITY, reason);
        }
    };
    let result = state.svc.write().ingest(&event);
    match result {
        Ok(r) => Json(r).into_response(),
        Err(e @ IngestError::Poisoned(_)) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
        Err(e @ IngestError::Unavailable(_)) => error(StatusCode::SERVICE_UNAVAILABLE, e),
        Err(e) => {
            tracing::error!(error = %e, "registration failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, e)
        }
    }
}

async fn get_user_cluster(State(state): State<AppState>, Path(id): Path<u64>) -> Response {
    let u = match user_id(id) {
        Ok(u) => u,
        Err(r) => return r,
    };
    match state.svc.read().user_cluster(u) {
        Some(v) => Json(v).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("user {u} is not registered")),
    }
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    limit: Option<usize>,
    cursor: Option<String>,
    flow: Option<QueueOrigin>,
}

async fn get_queue(State(state): State<AppState>, headers: HeaderMap, Query(p): Query<QueueParams>) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    let limit = p.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    Json(state.svc.read().queue_page(limit, p.cursor.as_deref(), p.flow)).into_response()
}

async fn get_cluster(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<u64>) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    let c = match user_id(id) {
        Ok(u) => ClusterId(u),
        Err(r) => return r,
    };
    match state.svc.read().cluster_detail(c) {
        Some(d) => Json(d).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no cluster {c}")),
    }
}

async fn post_decision(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<u64>,
    Json(req): Json<DecisionRequest>,
) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    let c = match user_id(id) {
        Ok(u) => ClusterId(u),
        Err(r) => return r,
    };
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64);
    let result = state.svc.write().record_decision(c, req, now);
    match result {
        Ok(o) => Json(o).into_response(),
        Err(DecisionError::Duplicate { existing }) => (
            StatusCode::CONFLICT,
            Json(json!({ "error": "cluster already decided", "existing": existing })),
        )
            .into_response(),
        Err(e @ DecisionError::NotQueued(_)) => error(StatusCode::NOT_FOUND, e),
        Err(e @ DecisionError::InvalidSplit(_)) => error(StatusCode::BAD_REQUEST, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn get_metrics(State(state): State<AppState>) -> Response {
    Json(state.svc.read().metrics()).into_response()
}

/// Binds the configured address and serves until ctrl-c.
pub async fn serve(svc: SharedService) -> std::io::Result<()> {
    let addr = svc.read().config().listen.clone();
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
