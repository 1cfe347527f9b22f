//! HTTP/JSON API for the learning UI and for operators.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use dtn_learn::content::ContentError;
use dtn_learn::node::NodeError;
use dtn_learn::store::StoreError;
use dtn_learn::NodeRole;

use crate::daemon::Shared;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        let msg = e.to_string();
        match e {
            NodeError::Content(ContentError::EmptyTitle) => ApiError::new(StatusCode::BAD_REQUEST, "empty_title", msg),
            NodeError::Content(ContentError::EmptyTopic) => ApiError::new(StatusCode::BAD_REQUEST, "empty_topic", msg),
            NodeError::Content(ContentError::NotFound(_)) => ApiError::new(StatusCode::NOT_FOUND, "not_found", msg),
            NodeError::NoContent(_) => ApiError::new(StatusCode::CONFLICT, "no_content_service", msg),
            NodeError::NoGateway => ApiError::new(StatusCode::CONFLICT, "no_gateway", msg),
            NodeError::Store(StoreError::StorageFull { .. }) => {
                ApiError::new(StatusCode::INSUFFICIENT_STORAGE, "storage_full", msg)
            }
            NodeError::Bundle(_) => ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "invalid_bundle", msg),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

fn body<T>(r: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    r.map(|Json(v)| v).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))
}

type ApiResult = Result<Response, ApiError>;

fn no_content(role: NodeRole) -> ApiError {
    NodeError::NoContent(role).into()
}

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/content", get(list_content).post(publish))
        .route("/api/content/{title}", get(get_content))
        .route("/api/requests", get(list_requests).post(request_topic))
        .route("/api/jobs", get(list_jobs))
        .route("/api/node/status", get(status))
        .route("/api/beacon", get(beacon).post(set_beacon))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such endpoint") })
        .with_state(shared)
}

async fn list_content(State(s): State<Arc<Shared>>) -> ApiResult {
    s.with_node(|n, _| {
        let c = n.content().ok_or_else(|| no_content(n.role()))?;
        Ok(Json(c.list()).into_response())
    })
}

#[derive(Deserialize)]
struct VersionQuery {
    version: Option<u32>,
}

async fn get_content(State(s): State<Arc<Shared>>, Path(title): Path<String>, Query(q): Query<VersionQuery>) -> ApiResult {
    s.with_node(|n, _| {
        let c = n.content().ok_or_else(|| no_content(n.role()))?;
        let item = c.get(&title, q.version).map_err(NodeError::from)?;
        Ok(Json(item).into_response())
    })
}

#[derive(Deserialize)]
struct PublishBody {
    title: String,
    body: String,
}

async fn publish(State(s): State<Arc<Shared>>, req: Result<Json<PublishBody>, JsonRejection>) -> ApiResult {
    let req = body(req)?;
    let item = s.with_node(|n, now| n.publish(&req.title, &req.body, now))?;
    Ok((StatusCode::CREATED, Json(item)).into_response())
}

async fn list_requests(State(s): State<Arc<Shared>>) -> ApiResult {
    s.with_node(|n, _| {
        let c = n.content().ok_or_else(|| no_content(n.role()))?;
        let mut all: Vec<_> = c.requests().cloned().collect();
        all.sort_by(|a, b| (a.created_at, &a.request_id).cmp(&(b.created_at, &b.request_id)));
        Ok(Json(all).into_response())
    })
}

#[derive(Deserialize)]
struct RequestBody {
    topic: String,
}

async fn request_topic(State(s): State<Arc<Shared>>, req: Result<Json<RequestBody>, JsonRejection>) -> ApiResult {
    let req = body(req)?;
    let (r, existed) = s.with_node(|n, now| {
        let before = n.content().map_or(0, |c| c.requests().count());
        let r = n.request_topic(&req.topic, now)?;
        let after = n.content().map_or(0, |c| c.requests().count());
        Ok::<_, NodeError>((r, after == before))
    })?;
    let code = if existed { StatusCode::OK } else { StatusCode::CREATED };
    Ok((code, Json(r)).into_response())
}

async fn list_jobs(State(s): State<Arc<Shared>>) -> ApiResult {
    s.with_node(|n, _| match n.gateway() {
        Some(g) => Ok(Json(g.jobs().cloned().collect::<Vec<_>>()).into_response()),
        None => Err(ApiError::new(StatusCode::CONFLICT, "no_gateway", "only urban nodes run fetch jobs")),
    })
}

async fn status(State(s): State<Arc<Shared>>) -> ApiResult {
    Ok(Json(s.with_node(|n, _| n.status())).into_response())
}

async fn beacon(State(s): State<Arc<Shared>>) -> ApiResult {
    Ok(Json(json!({"enabled": s.beacon_enabled()})).into_response())
}

#[derive(Deserialize)]
struct BeaconBody {
    enabled: bool,
}

async fn set_beacon(State(s): State<Arc<Shared>>, req: Result<Json<BeaconBody>, JsonRejection>) -> ApiResult {
    let req = body(req)?;
    if s.cfg.role != NodeRole::Mule {
        return Err(ApiError::new(StatusCode::CONFLICT, "not_a_mule", "only mules beacon"));
    }
    s.set_beacon(req.enabled);
    Ok(Json(json!({"enabled": s.beacon_enabled()})).into_response())
}
