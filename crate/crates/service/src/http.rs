use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;

use crate::api::{ApiError, CreateRequest, ErrorCode, LabelSubmission};
use crate::manager::SessionManager;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.code {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::Validation => StatusCode::BAD_REQUEST,
            ErrorCode::Exhausted => StatusCode::UNPROCESSABLE_ENTITY,
        };
        (status, Json(self)).into_response()
    }
}

// Body parsing by hand so malformed JSON also comes back as an ApiError.
fn parse<B: DeserializeOwned>(body: &Bytes) -> Result<B, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("malformed request body: {e}")))
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> Result<R, ApiError> + Send + 'static) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::conflict(format!("worker failed: {e}"))))
}

async fn create(State(m): State<Arc<SessionManager>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let request: CreateRequest = parse(&body)?;
    let state = blocking(move || m.create(&request)).await?;
    Ok((StatusCode::CREATED, Json(state)))
}

async fn status(State(m): State<Arc<SessionManager>>, Path(token): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(m.status(&token)?))
}

async fn batch(State(m): State<Arc<SessionManager>>, Path(token): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(m.batch(&token)?))
}

async fn labels(State(m): State<Arc<SessionManager>>, Path(token): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let submission: LabelSubmission = parse(&body)?;
    let ticket = m.begin_submit(&token, submission.pairs())?;
    // The refit finishes even if the client goes away.
    let state = blocking(move || m.finish_submit(ticket)).await?;
    Ok(Json(state))
}

async fn abort(State(m): State<Arc<SessionManager>>, Path(token): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(m.abort(&token)?))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such route")
}

async fn wrong_method() -> ApiError {
    ApiError::validation("method not allowed on this route")
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{token}", get(status))
        .route("/v1/sessions/{token}/batch", get(batch))
        .route("/v1/sessions/{token}/labels", post(labels))
        .route("/v1/sessions/{token}/abort", post(abort))
        .fallback(fallback)
        .method_not_allowed_fallback(wrong_method)
        .with_state(manager)
}

/// Serves `manager` on `addr` until the process is stopped.
pub async fn serve(manager: Arc<SessionManager>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(manager)).await
}
