//! Client-facing HTTP proxy. All job state lives in the store; the proxy
//! validates, routes and answers, so it can be restarted at any time.
//!
//! Public: `POST /jobs`, `GET /jobs/{id}`, `GET /jobs/{id}/result`,
//! `GET /healthz`. Internal, for worker processes: `POST /internal/claim`,
//! `POST /internal/jobs/{id}/{heartbeat,complete,fail}`, `GET /internal/stats`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deid_core::backends::Registry;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::job::{JobPayload, JobRecord, JobStatus};
use crate::store::{JobStore, StoreError};
use crate::worker::{ClaimRequest, CompleteRequest, FailRequest, LeaseRequest};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<dyn JobStore>,
    pub registry: Arc<Registry>,
}

struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, json!({"error": message.into()}))
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::NotFound(id) => ApiError(StatusCode::NOT_FOUND, json!({"error": message, "job_id": id})),
            StoreError::Conflict { id, status, .. } => {
                ApiError(StatusCode::CONFLICT, json!({"error": message, "job_id": id, "status": status}))
            }
            StoreError::Duplicate(id) => ApiError(StatusCode::CONFLICT, json!({"error": message, "job_id": id})),
            StoreError::Io(_) => ApiError(StatusCode::SERVICE_UNAVAILABLE, json!({"error": message})),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/jobs", post(submit))
        .route("/jobs/{id}", get(status))
        .route("/jobs/{id}/result", get(result))
        .route("/internal/claim", post(claim))
        .route("/internal/stats", get(stats))
        .route("/internal/jobs/{id}/heartbeat", post(heartbeat))
        .route("/internal/jobs/{id}/complete", post(complete))
        .route("/internal/jobs/{id}/fail", post(fail))
        .with_state(state)
}

fn lookup(state: &AppState, id: &str) -> ApiResult<JobRecord> {
    state.store.get(id)?.ok_or_else(|| StoreError::NotFound(id.to_string()).into())
}

async fn submit(
    State(state): State<AppState>,
    payload: Result<Json<JobPayload>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let Json(payload) = payload.map_err(|e| ApiError::bad_request(e.body_text()))?;
    payload.validate(&state.registry).map_err(ApiError::bad_request)?;
    let job_id = uuid::Uuid::new_v4().to_string();
    state.store.insert(JobRecord::new(job_id.clone(), payload))?;
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job_id, "status": JobStatus::Pending}))))
}

async fn status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<crate::job::JobView>> {
    Ok(Json(lookup(&state, &id)?.view()))
}

async fn result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = lookup(&state, &id)?;
    match job.result {
        Some(result) if job.status == JobStatus::Done => Ok(Json(result).into_response()),
        _ => Err(ApiError(
            StatusCode::CONFLICT,
            json!({"error": "result not available", "job_id": id, "status": job.status}),
        )),
    }
}

async fn claim(State(state): State<AppState>, Json(req): Json<ClaimRequest>) -> ApiResult<Response> {
    match state.store.claim(&req.worker_id, Duration::from_millis(req.lease_ms))? {
        Some(claim) => Ok(Json(claim).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn stats(State(state): State<AppState>) -> ApiResult<Json<crate::store::StoreCounts>> {
    Ok(Json(state.store.counts()?))
}

async fn heartbeat(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<LeaseRequest>,
) -> ApiResult<StatusCode> {
    state.store.heartbeat(&id, req.token, Duration::from_millis(req.lease_ms))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn complete(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<CompleteRequest>,
) -> ApiResult<StatusCode> {
    state.store.complete(&id, req.token, req.result)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn fail(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<FailRequest>,
) -> ApiResult<StatusCode> {
    state.store.fail(&id, req.token, &req.reason)?;
    Ok(StatusCode::NO_CONTENT)
}

/// A proxy serving in the background.
pub struct ProxyHandle {
    pub addr: SocketAddr,
    shutdown: oneshot::Sender<()>,
    join: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl ProxyHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(self) -> std::io::Result<()> {
        let _ = self.shutdown.send(());
        self.join.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

pub async fn start_proxy(state: AppState, addr: SocketAddr) -> std::io::Result<ProxyHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (shutdown, rx) = oneshot::channel::<()>();
    let app = router(state);
    let join = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "proxy listening");
    Ok(ProxyHandle { addr, shutdown, join })
}
