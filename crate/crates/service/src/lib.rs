//! Model distribution and contribution endpoint.
//!
//! Routes:
//! - `GET /model/latest`, `GET /model/{version}`: model file, with
//!   `x-model-version` and `x-model-checksum` headers
//! - `GET /models`: manifest list
//! - `POST /contribute`: one [`Contribution`], answered with 202

mod contribution;
mod registry;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderName, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

pub use contribution::{parse_contribution, Contribution, ContributionError, ContributionStore, IDENTIFYING_FIELDS};
pub use registry::{ModelManifest, ModelRegistry, RegistryError};

pub const VERSION_HEADER: &str = "x-model-version";
pub const CHECKSUM_HEADER: &str = "x-model-checksum";

#[derive(Debug, Clone)]
pub struct AppState {
    pub registry: Arc<ModelRegistry>,
    pub store: ContributionStore,
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(serde_json::json!({ "error": msg.to_string() }))).into_response()
}

fn model_response(state: &AppState, version: Option<u64>) -> Response {
    let registry = Arc::clone(&state.registry);
    match registry.fetch(version) {
        Ok((m, bytes)) => (
            [
                (header::CONTENT_TYPE, "application/json".to_string()),
                (HeaderName::from_static(VERSION_HEADER), m.version.to_string()),
                (HeaderName::from_static(CHECKSUM_HEADER), m.checksum),
            ],
            bytes,
        )
            .into_response(),
        Err(e @ RegistryError::NoModel) => error(StatusCode::SERVICE_UNAVAILABLE, e),
        Err(e @ RegistryError::UnknownVersion(_)) => error(StatusCode::NOT_FOUND, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn latest(State(state): State<AppState>) -> Response {
    tokio::task::spawn_blocking(move || model_response(&state, None))
        .await
        .unwrap_or_else(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e))
}

async fn by_version(State(state): State<AppState>, Path(version): Path<u64>) -> Response {
    tokio::task::spawn_blocking(move || model_response(&state, Some(version)))
        .await
        .unwrap_or_else(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e))
}

async fn list(State(state): State<AppState>) -> Response {
    match state.registry.manifests() {
        Ok(l) => Json(l).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn contribute(State(state): State<AppState>, body: Bytes) -> Response {
    let c = match parse_contribution(&body) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match state.store.append(&c).await {
        Ok(()) => (StatusCode::ACCEPTED, Json(serde_json::json!({ "accepted": true }))).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model/latest", get(latest))
        .route("/model/{version}", get(by_version))
        .route("/models", get(list))
        .route("/contribute", post(contribute))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
