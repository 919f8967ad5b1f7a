//! JSON routes over an [`Engine`].

use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tower_http::services::ServeDir;

use crate::engine::{Applied, Engine, LoggedRequest, Report, RoundView, SessionRequest, SubmitOutcome, Submission};
use crate::ServiceError;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        use refgame_core::Error as E;
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(E::Invalid(_) | E::UnknownObject(_) | E::EmptyUtterance | E::Parse { .. }) => StatusCode::BAD_REQUEST,
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

type Shared = Arc<Engine>;

/// Routes under `/api`, plus `/static` serving object renders from `assets` when given.
pub fn router(engine: Shared, assets: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(|| async { "ok" }))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/round", get(current_round))
        .route("/api/sessions/{id}/rounds", post(submit_round))
        .route("/api/sessions/{id}/report", get(session_report))
        .route("/api/report", get(aggregate_report))
        .with_state(engine);
    match assets {
        Some(dir) => api.nest_service("/static", ServeDir::new(dir)),
        None => api,
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Core(refgame_core::Error::Invalid(format!("worker failed: {e}"))))?
}

async fn create_session(State(engine): State<Shared>, Json(request): Json<SessionRequest>) -> Result<(StatusCode, Json<RoundView>), ServiceError> {
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let applied = blocking(move || engine.apply(LoggedRequest::CreateSession { session_id, created_at, request })).await?;
    match applied {
        Applied::Created(view) => Ok((StatusCode::CREATED, Json(view))),
        Applied::Submitted(_) => unreachable!("create requests yield a round view"),
    }
}

async fn current_round(State(engine): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<RoundView>, ServiceError> {
    engine.current_round(&id).map(Json)
}

async fn submit_round(State(engine): State<Shared>, UrlPath(id): UrlPath<String>, Json(submission): Json<Submission>) -> Result<Json<SubmitOutcome>, ServiceError> {
    let applied = blocking(move || engine.apply(LoggedRequest::SubmitRound { session_id: id, submission })).await?;
    match applied {
        Applied::Submitted(out) => Ok(Json(out)),
        Applied::Created(_) => unreachable!("submissions yield an outcome"),
    }
}

async fn session_report(State(engine): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Report>, ServiceError> {
    engine.report(&id).map(Json)
}

async fn aggregate_report(State(engine): State<Shared>) -> Json<Report> {
    Json(engine.aggregate())
}
