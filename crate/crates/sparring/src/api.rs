//! HTTP and server-sent-events surface.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use sparring_core::agent::Decision;
use sparring_core::domain::{new_run_id, RunConfig};
use sparring_core::llm::ModelParams;
use sparring_core::planner::{plan, PlanError, PlanTree};

use crate::registry::PLAN_DEMO;
use crate::runs::{RunError, RunManager};

pub const SECRET_HEADER: &str = "x-sparring-secret";

#[derive(Clone)]
pub struct AppState {
    pub runs: Arc<RunManager>,
    pub plans: Arc<Mutex<BTreeMap<String, PlanRecord>>>,
    pub secret: Option<Arc<str>>,
}

impl AppState {
    pub fn new(runs: RunManager, secret: Option<String>) -> Self {
        Self {
            runs: Arc::new(runs),
            plans: Arc::new(Mutex::new(BTreeMap::new())),
            secret: secret.map(Into::into),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRecord {
    pub plan_id: String,
    pub goal: String,
    pub backend: String,
    pub tree: PlanTree,
    pub outline: String,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

#[derive(Debug)]
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
}

impl From<RunError> for ApiError {
    fn from(err: RunError) -> Self {
        let (status, code) = match &err {
            RunError::ValidationFailed(_) => (StatusCode::BAD_REQUEST, "validation_failed"),
            RunError::TargetUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "target_unavailable"),
            RunError::UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown_run"),
            RunError::ConflictingState(_) => (StatusCode::CONFLICT, "conflicting_state"),
            RunError::RunFinished(_) => (StatusCode::CONFLICT, "run_finished"),
            RunError::Protocol(_) => (StatusCode::INTERNAL_SERVER_ERROR, "protocol_error"),
        };
        Self::new(status, code, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

/// Refuse to listen beyond loopback without a shared secret.
pub fn check_bind(addr: &SocketAddr, secret: Option<&str>) -> Result<(), String> {
    let loopback = match addr.ip() {
        IpAddr::V4(ip) => ip.is_loopback(),
        IpAddr::V6(ip) => ip.is_loopback(),
    };
    if !loopback && secret.is_none_or(|s| s.is_empty()) {
        return Err(format!("binding to {addr} requires a shared secret"));
    }
    Ok(())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/runs", post(start_run).get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/events", get(events))
        .route("/api/runs/{id}/approval", post(approval))
        .route("/api/runs/{id}/hints", post(hint))
        .route("/api/runs/{id}/protocol", get(protocol))
        .route("/api/plans", post(create_plan))
        .route("/api/plans/{id}", get(get_plan))
        .layer(middleware::from_fn_with_state(state.clone(), require_secret))
        .with_state(state)
}

async fn require_secret(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(secret) = &state.secret {
        let given = request.headers().get(SECRET_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(secret.as_ref()) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong shared secret",
            )
            .into_response();
        }
    }
    next.run(request).await
}

#[derive(Serialize)]
struct Started {
    run_id: String,
}

async fn start_run(State(state): State<AppState>, body: axum::body::Bytes) -> Result<impl IntoResponse, ApiError> {
    let config: RunConfig = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "validation_failed", e.to_string()))?;
    let runs = state.runs.clone();
    let handle = tokio::task::spawn_blocking(move || runs.start(config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok((
        StatusCode::CREATED,
        Json(Started {
            run_id: handle.run_id.clone(),
        }),
    ))
}

async fn list_runs(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.runs.list())
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(state.runs.get(&id)?.snapshot()))
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let handle = state.runs.get(&id)?;
    let after = match headers.get("last-event-id") {
        None => 0,
        Some(v) => v
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "validation_failed",
                    "Last-Event-ID must be a seq number",
                )
            })?,
    };
    let seen = handle.subscribe();
    let stream = stream::unfold(
        (handle, seen, after, false),
        |(handle, mut seen, after, done)| async move {
            if done {
                return None;
            }
            loop {
                let pending = handle.events_after(after);
                if let Some(event) = pending.into_iter().next() {
                    let terminal = event.is_terminal();
                    let frame = Event::default().id(event.seq.to_string()).data(event.to_line());
                    return Some((Ok(frame), (handle, seen, event.seq, terminal)));
                }
                if handle.snapshot().status.is_terminal() {
                    return None;
                }
                if seen.changed().await.is_err() {
                    // Loop thread is gone; flush whatever it left.
                    if handle.events_after(after).is_empty() {
                        return None;
                    }
                }
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ApprovalBody {
    decision: String,
    command: Option<String>,
}

async fn approval(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<ApprovalBody>,
) -> Result<impl IntoResponse, ApiError> {
    let decision = match body.decision.as_str() {
        "approve" => Decision::Approve,
        "deny" => Decision::Deny,
        "abort" => Decision::Abort,
        "edit" => Decision::Edit(body.command.unwrap_or_default()),
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "validation_failed",
                format!("unknown decision {other:?}"),
            ))
        }
    };
    Ok(Json(state.runs.submit_approval(&id, decision).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HintBody {
    text: String,
}

async fn hint(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<HintBody>,
) -> Result<impl IntoResponse, ApiError> {
    state.runs.submit_hint(&id, &body.text)?;
    Ok(StatusCode::ACCEPTED)
}

async fn protocol(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let handle = state.runs.get(&id)?;
    let text = tokio::fs::read_to_string(&handle.protocol_path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "protocol_error", e.to_string()))?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/x-ndjson")], text))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanBody {
    goal: String,
    backend: Option<String>,
    #[serde(default)]
    model: Option<ModelParams>,
}

async fn create_plan(State(state): State<AppState>, Json(body): Json<PlanBody>) -> Result<impl IntoResponse, ApiError> {
    let backend_name = body.backend.unwrap_or_else(|| PLAN_DEMO.to_string());
    let backend = state
        .runs
        .registry()
        .backend(&backend_name)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "validation_failed", e.to_string()))?;
    let goal = body.goal.clone();
    let params = body.model.unwrap_or_default();
    let tree = tokio::task::spawn_blocking(move || plan(&goal, backend.as_ref(), &params))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| match e {
            PlanError::EmptyGoal => ApiError::new(StatusCode::BAD_REQUEST, "validation_failed", e.to_string()),
            other => ApiError::new(StatusCode::BAD_GATEWAY, "planning_failed", other.to_string()),
        })?;
    let record = PlanRecord {
        plan_id: new_run_id(),
        goal: body.goal,
        backend: backend_name,
        outline: tree.render_outline(),
        tree,
    };
    state
        .plans
        .lock()
        .expect("plans lock")
        .insert(record.plan_id.clone(), record.clone());
    Ok((StatusCode::CREATED, Json(record)))
}

async fn get_plan(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    state
        .plans
        .lock()
        .expect("plans lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_plan", format!("unknown plan {id}")))
}
