//! JSON-over-HTTP front end for [`Service`].

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::service::{Service, ServiceError};

pub type Shared = Arc<Mutex<Service>>;

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Protocol(_) => StatusCode::CONFLICT,
            ServiceError::Storage { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

/// Malformed bodies are validation errors (400), not axum's default 422.
struct Body<T>(T);

impl<S, T> axum::extract::FromRequest<S> for Body<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = Response;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ServiceError::Invalid(e.body_text()).into_response()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    worker_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateAnswer {
    answer: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Message {
    message: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Choice {
    choice: String,
    #[serde(default)]
    turn: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    include_flagged: bool,
}

fn lock(svc: &Shared) -> std::sync::MutexGuard<'_, Service> {
    svc.lock().unwrap_or_else(|p| p.into_inner())
}

async fn create_session(State(svc): State<Shared>, Body(b): Body<CreateSession>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(lock(&svc).create_session(&b.worker_id)?))
}

async fn gate(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Body(b): Body<GateAnswer>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(lock(&svc).submit_gate(&id, &b.answer)?))
}

async fn turn(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Body(b): Body<Message>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(lock(&svc).next_turn(&id, &b.message)?))
}

async fn choice(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Body(b): Body<Choice>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(lock(&svc).submit_choice(&id, &b.choice, b.turn)?))
}

async fn close(State(svc): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(lock(&svc).new_conversation(&id)?))
}

async fn session(State(svc): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(lock(&svc).state(&id)?))
}

async fn export(State(svc): State<Shared>, Query(q): Query<ExportQuery>) -> Result<Response, ServiceError> {
    let records = lock(&svc).export(q.include_flagged)?;
    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(r).expect("records serialize"));
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/gate", post(gate))
        .route("/sessions/{id}/turns", post(turn))
        .route("/sessions/{id}/choice", post(choice))
        .route("/sessions/{id}/close", post(close))
        .route("/export", get(export))
        .with_state(svc)
}

/// Serves on an already-bound listener until the future resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    svc: Service,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(Mutex::new(svc))))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, svc: Service) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, svc, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
