//! HTTP front end for the annotation queue.
//!
//! Annotators identify themselves with the `x-annotator` header on every
//! call that claims, releases or submits. Payloads are JSON, except
//! `GET /export`, which streams annotation records as JSON lines in the
//! same format the pipeline ingests.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ilf_core::annotation::{
    edit_distance_query, write_records, AnnotationError, AnnotationService, SubmitRequest, Verdict,
};
use ilf_core::model::TaskId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ANNOTATOR_HEADER: &str = "x-annotator";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing or empty {ANNOTATOR_HEADER} header")]
    MissingAnnotator,
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("worker task failed: {0}")]
    Join(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

impl ApiError {
    fn status_and_kind(&self) -> (StatusCode, &'static str) {
        match self {
            ApiError::MissingAnnotator => (StatusCode::BAD_REQUEST, "validation"),
            ApiError::Join(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            ApiError::Annotation(e) => match e {
                AnnotationError::Empty(_) | AnnotationError::NoSuchProgram { .. } => {
                    (StatusCode::BAD_REQUEST, "validation")
                }
                AnnotationError::UnknownItem(_) => (StatusCode::NOT_FOUND, "not_found"),
                AnnotationError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
                AnnotationError::InvalidState { .. } => (StatusCode::CONFLICT, "invalid_state"),
                AnnotationError::TargetNotFailing(_)
                | AnnotationError::MissingEval(_)
                | AnnotationError::MissingRefinement(_)
                | AnnotationError::MismatchedRef { .. }
                | AnnotationError::CannotDerange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable"),
                AnnotationError::Sandbox(_) | AnnotationError::Records(_) | AnnotationError::Io(_) => {
                    (StatusCode::INTERNAL_SERVER_ERROR, "internal")
                }
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = self.status_and_kind();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            error: self.to_string(),
            kind: kind.into(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AnnotationService>;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunTestsRequest {
    pub program_text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub verified: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub task_id: TaskId,
    pub verdict: Verdict,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditDistanceRequest {
    pub original: String,
    pub draft: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditDistanceResponse {
    pub distance: usize,
    pub ratio: f64,
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/queue", get(list))
        .route("/queue/next", post(next))
        .route("/queue/{id}", get(item))
        .route("/queue/{id}/claim", post(claim))
        .route("/queue/{id}/release", post(release))
        .route("/queue/{id}/run-tests", post(run_tests))
        .route("/queue/{id}/submit", post(submit))
        .route("/queue/{id}/review", post(review))
        .route("/edit-distance", post(edit_distance))
        .route("/export", get(export))
        .with_state(service)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, service: Shared) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "annotation service listening");
    axum::serve(listener, router(service)).await
}

fn annotator(headers: &HeaderMap) -> ApiResult<String> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .ok_or(ApiError::MissingAnnotator)
}

/// Sandbox runs spawn child processes and block; keep them off the
/// async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, AnnotationError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Join(e.to_string()))?
        .map_err(ApiError::from)
}

async fn list(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.list())
}

async fn next(State(svc): State<Shared>, headers: HeaderMap) -> ApiResult<Response> {
    let who = annotator(&headers)?;
    Ok(match svc.next_item(&who)? {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn item(State(svc): State<Shared>, Path(id): Path<TaskId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.item(id)?))
}

async fn claim(State(svc): State<Shared>, Path(id): Path<TaskId>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    let who = annotator(&headers)?;
    Ok(Json(svc.claim(&who, id)?))
}

async fn release(
    State(svc): State<Shared>,
    Path(id): Path<TaskId>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let who = annotator(&headers)?;
    Ok(Json(svc.release(&who, id)?))
}

async fn run_tests(
    State(svc): State<Shared>,
    Path(id): Path<TaskId>,
    Json(req): Json<RunTestsRequest>,
) -> ApiResult<impl IntoResponse> {
    let outcome = blocking(move || svc.run_tests(id, &req.program_text)).await?;
    Ok(Json(outcome))
}

async fn submit(
    State(svc): State<Shared>,
    Path(id): Path<TaskId>,
    headers: HeaderMap,
    Json(req): Json<SubmitRequest>,
) -> ApiResult<impl IntoResponse> {
    let who = annotator(&headers)?;
    let receipt = blocking(move || svc.submit(&who, id, &req)).await?;
    tracing::info!(task_id = id, status = ?receipt.status, "submission evaluated");
    Ok(Json(receipt))
}

async fn review(
    State(svc): State<Shared>,
    Path(id): Path<TaskId>,
    Json(req): Json<ReviewRequest>,
) -> ApiResult<impl IntoResponse> {
    let verdict = svc.review(id, req.verified)?;
    Ok(Json(ReviewResponse { task_id: id, verdict }))
}

async fn edit_distance(Json(req): Json<EditDistanceRequest>) -> impl IntoResponse {
    let (distance, ratio) = edit_distance_query(&req.original, &req.draft);
    Json(EditDistanceResponse { distance, ratio })
}

async fn export(State(svc): State<Shared>) -> ApiResult<impl IntoResponse> {
    let mut body = Vec::new();
    write_records(&mut body, &svc.export_accepted())?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}
