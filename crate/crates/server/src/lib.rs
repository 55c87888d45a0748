//! HTTP routes under `/api/v1`, backed by [`medtext::api::ApiState`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use medtext::api::{to_json, ApiError, ApiState, SearchParams, ServiceConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

type Shared = Arc<ApiState>;

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn reply<T: Serialize>(result: Result<T, ApiError>) -> Response {
    match result {
        Ok(v) => json_response(StatusCode::OK, to_json(&v)),
        Err(e) => error_response(&e),
    }
}

fn error_response(e: &ApiError) -> Response {
    let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    json_response(status, to_json(e))
}

type Body = Result<Bytes, BytesRejection>;

fn parse_body<T: DeserializeOwned>(body: &Body) -> Result<T, ApiError> {
    let body = body.as_ref().map_err(|e| {
        let status = e.status().as_u16();
        let code = if status == 413 { "payload_too_large" } else { "bad_request" };
        ApiError::new(status, code, e.body_text())
    })?;
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Runs blocking work (training, flow runs) off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::internal(e.to_string())))
}

async fn analyze(State(s): State<Shared>, body: Body) -> Response {
    reply(parse_body(&body).and_then(|req| s.analyze(&req)))
}

async fn deid(State(s): State<Shared>, body: Body) -> Response {
    reply(parse_body(&body).and_then(|req| s.deid(&req)))
}

async fn search(State(s): State<Shared>, q: Result<Query<SearchParams>, QueryRejection>) -> Response {
    match q {
        Ok(Query(params)) => reply(s.search(&params)),
        Err(e) => error_response(&ApiError::bad_request(e.body_text())),
    }
}

async fn create_flow(State(s): State<Shared>, body: Body) -> Response {
    reply(parse_body(&body).and_then(|g| s.create_flow(g)))
}

async fn run_flow(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    reply(blocking(move || s.run_flow(&id)).await)
}

async fn flow_report(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    reply(s.flow_report(&id))
}

async fn create_project(State(s): State<Shared>, body: Body) -> Response {
    reply(parse_body(&body).and_then(|spec| s.create_project(spec)))
}

#[derive(Deserialize)]
struct NextParams {
    #[serde(default)]
    annotator: String,
}

async fn next_document(
    State(s): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<NextParams>, QueryRejection>,
) -> Response {
    let annotator = q.map(|Query(p)| p.annotator).unwrap_or_default();
    reply(blocking(move || s.next_document(&id, &annotator)).await)
}

async fn submit(State(s): State<Shared>, Path(id): Path<String>, body: Body) -> Response {
    let req = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    reply(blocking(move || s.submit_annotations(&id, req)).await)
}

async fn retrain(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    reply(blocking(move || s.retrain(&id)).await)
}

async fn metrics(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    reply(s.metrics(&id))
}

async fn cohort(State(s): State<Shared>, body: Body) -> Response {
    reply(parse_body(&body).and_then(|req| s.cohort(&req)))
}

async fn not_found() -> Response {
    error_response(&ApiError::not_found("no such endpoint"))
}

pub fn router(state: Shared) -> Router {
    let limit = state.config().max_body_bytes;
    let api = Router::new()
        .route("/analyze", post(analyze))
        .route("/deid", post(deid))
        .route("/search", get(search))
        .route("/flows", post(create_flow))
        .route("/flows/{id}/run", post(run_flow))
        .route("/flows/{id}/report", get(flow_report))
        .route("/projects", post(create_project))
        .route("/projects/{id}/next", get(next_document))
        .route("/projects/{id}/annotations", post(submit))
        .route("/projects/{id}/retrain", post(retrain))
        .route("/projects/{id}/metrics", get(metrics))
        .route("/cohort/evaluate", post(cohort));
    Router::new()
        .nest("/api/v1", api)
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds `config.listen` and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let listen = config.listen.clone();
    let state = tokio::task::spawn_blocking(move || ApiState::open(config)).await??;
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
