//! JSON HTTP API over a [`SessionService`].

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use sketchsmith_core::knobs::KnobError;
use sketchsmith_core::llm::ProviderError;
use sketchsmith_core::{HardwareManifest, SessionError, SessionService};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(err: SessionError) -> Self {
        use StatusCode as S;
        let message = err.to_string();
        let (status, code) = match &err {
            SessionError::NotFound(_) => (S::NOT_FOUND, "not-found"),
            SessionError::InvalidManifest(report) => {
                return ApiError {
                    status: S::UNPROCESSABLE_ENTITY,
                    code: "invalid-manifest",
                    message,
                    details: serde_json::to_value(report).ok(),
                }
            }
            SessionError::EmptyInstruction => (S::BAD_REQUEST, "empty-instruction"),
            SessionError::NoSketch => (S::CONFLICT, "no-sketch"),
            SessionError::Rejected(_) => (S::CONFLICT, "rejected"),
            SessionError::Provider(ProviderError::Timeout) => {
                (S::GATEWAY_TIMEOUT, "provider-timeout")
            }
            SessionError::Provider(ProviderError::Config(_)) => {
                (S::INTERNAL_SERVER_ERROR, "provider-config")
            }
            SessionError::Provider(_) => (S::BAD_GATEWAY, "provider-error"),
            SessionError::Toolchain(_) => (S::BAD_GATEWAY, "toolchain-error"),
            SessionError::Knob(KnobError::UnknownKnob(_)) => (S::NOT_FOUND, "unknown-knob"),
            SessionError::Knob(KnobError::StaleManifest) => (S::CONFLICT, "stale-manifest"),
            SessionError::Knob(_) => (S::UNPROCESSABLE_ENTITY, "invalid-knob-value"),
            SessionError::Replay(_) | SessionError::Store(_) => {
                (S::INTERNAL_SERVER_ERROR, "store-error")
            }
        };
        ApiError::new(status, code, message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad-request",
            rejection.body_text(),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(details) = self.details {
            error["details"] = details;
        }
        (self.status, Json(json!({ "error": error }))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;
type Shared = State<Arc<SessionService>>;

/// Runs a blocking service call off the async runtime.
async fn blocking<T, F>(service: Arc<SessionService>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&SessionService) -> Result<T, SessionError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Deserialize)]
struct CreateBody {
    manifest: HardwareManifest,
}

#[derive(Deserialize)]
struct MessageBody {
    text: String,
}

#[derive(Deserialize)]
struct PortBody {
    port: String,
}

#[derive(Deserialize)]
struct KnobBody {
    value: f64,
}

fn session_json(session: impl serde::Serialize) -> ApiResult {
    Ok(Json(json!({ "session": session })))
}

async fn create_session(
    State(svc): Shared,
    body: Result<Json<CreateBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return ApiError::from(e).into_response(),
    };
    match blocking(svc, move |s| s.create_session(body.manifest)).await {
        Ok(session) => (StatusCode::CREATED, Json(json!({ "session": session }))).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn list_sessions(State(svc): Shared) -> ApiResult {
    Ok(Json(json!({ "sessions": svc.session_ids() })))
}

async fn get_session(State(svc): Shared, Path(id): Path<String>) -> ApiResult {
    session_json(blocking(svc, move |s| s.get(&id)).await?)
}

async fn post_message(
    State(svc): Shared,
    Path(id): Path<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    session_json(blocking(svc, move |s| s.post_instruction(&id, &body.text)).await?)
}

async fn compile(State(svc): Shared, Path(id): Path<String>) -> ApiResult {
    session_json(blocking(svc, move |s| s.compile_current(&id)).await?)
}

async fn upload(
    State(svc): Shared,
    Path(id): Path<String>,
    body: Result<Json<PortBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    session_json(blocking(svc, move |s| s.upload_current(&id, &body.port)).await?)
}

async fn compile_upload(
    State(svc): Shared,
    Path(id): Path<String>,
    body: Result<Json<PortBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    session_json(blocking(svc, move |s| s.compile_and_upload(&id, &body.port)).await?)
}

async fn get_knobs(State(svc): Shared, Path(id): Path<String>) -> ApiResult {
    let knobs = blocking(svc, move |s| s.get_knobs(&id)).await?;
    Ok(Json(json!({ "knobs": knobs })))
}

async fn set_knob(
    State(svc): Shared,
    Path((id, knob_id)): Path<(String, String)>,
    body: Result<Json<KnobBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    session_json(blocking(svc, move |s| s.set_knob(&id, &knob_id, body.value)).await?)
}

async fn ports(State(svc): Shared) -> ApiResult {
    let ports = blocking(svc, |s| s.list_ports()).await?;
    Ok(Json(json!({ "ports": ports })))
}

async fn catalog(State(svc): Shared) -> ApiResult {
    Ok(Json(json!({ "catalog": svc.catalog() })))
}

pub fn router(service: Arc<SessionService>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/:id", get(get_session))
        .route("/api/sessions/:id/message", post(post_message))
        .route("/api/sessions/:id/compile", post(compile))
        .route("/api/sessions/:id/upload", post(upload))
        .route("/api/sessions/:id/compile-upload", post(compile_upload))
        .route("/api/sessions/:id/knobs", get(get_knobs))
        .route("/api/sessions/:id/knobs/:knob_id", patch(set_knob))
        .route("/api/ports", get(ports))
        .route("/api/catalog", get(catalog))
        .with_state(service)
}
