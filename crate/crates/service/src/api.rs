//! Routes and JSON error mapping.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower_http::cors::{Any, CorsLayer};
use trafficsift_core::pipeline::StepReport;
use trafficsift_core::updater::Verdict;

use crate::hub::{
    ConfusionResponse, ConfusionView, GroupDetail, GroupView, Hub, ProjectionResponse, QueueView, StageError,
    StatusView,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// One of `not_found`, `conflict`, `validation`.
    pub error: String,
    pub message: String,
    pub field: Option<String>,
    /// Current state of the group a conflicting verdict targeted.
    pub group: Option<GroupView>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Box<ErrorBody>,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            body: Box::new(ErrorBody {
                error: "not_found".into(),
                message,
                field: None,
                group: None,
            }),
        }
    }

    fn validation(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: Box::new(ErrorBody {
                error: "validation".into(),
                message: message.into(),
                field: Some(field.into()),
                group: None,
            }),
        }
    }
}

impl From<StageError> for ApiError {
    fn from(e: StageError) -> Self {
        match e {
            StageError::UnknownGroup(gid) => Self::not_found(format!("no expert group {gid}")),
            StageError::Conflict { message, group } => Self {
                status: StatusCode::CONFLICT,
                body: Box::new(ErrorBody {
                    error: "conflict".into(),
                    message,
                    field: None,
                    group: Some(*group),
                }),
            },
            StageError::Invalid { field, message } => Self::validation(field, message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(*self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// The API router with CORS open to any origin for GET and POST.
pub fn router(hub: Arc<Hub>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/status", get(status))
        .route("/api/steps", get(steps))
        .route("/api/queue", get(queue))
        .route("/api/queue/{gid}", get(group))
        .route("/api/queue/{gid}/verdict", post(verdict))
        .route("/api/confusion", get(confusion))
        .route("/api/embedding-projection", get(projection))
        .layer(cors)
        .with_state(hub)
}

async fn status(State(hub): State<Arc<Hub>>) -> Json<StatusView> {
    let s = hub.read();
    Json(StatusView {
        step: s.step,
        status: s.status,
        error: s.error.clone(),
        label_set: s.label_set.clone(),
        label_set_version: s.label_set_version,
        pending_groups: s.queue.pending().count(),
        staged_verdicts: s.queue.staged().len(),
        latest_report: s.reports.last().cloned(),
    })
}

async fn steps(State(hub): State<Arc<Hub>>) -> Json<Vec<StepReport>> {
    Json(hub.read().reports.clone())
}

async fn queue(State(hub): State<Arc<Hub>>) -> Json<QueueView> {
    let s = hub.read();
    Json(QueueView {
        step: s.step,
        groups: s.queue.groups().iter().map(|g| s.group_view(g)).collect(),
    })
}

fn parse_gid(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::validation("gid", format!("`{raw}` is not a group id")))
}

async fn group(State(hub): State<Arc<Hub>>, Path(raw): Path<String>) -> ApiResult<GroupDetail> {
    let gid = parse_gid(&raw)?;
    let s = hub.read();
    let g = s
        .queue
        .group(gid)
        .ok_or_else(|| ApiError::not_found(format!("no expert group {gid}")))?;
    Ok(Json(GroupDetail {
        group: s.group_view(g),
        sample_ids: g.sample_ids.clone(),
        members: s.members.get(&gid).cloned().unwrap_or_default(),
        centroids: s.projection.as_ref().map(|p| p.centroids.clone()).unwrap_or_default(),
    }))
}

/// Parses a verdict body, naming the first offending field.
pub fn parse_verdict(body: &[u8]) -> Result<Verdict, ApiError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::validation("body", format!("body is not JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ApiError::validation("body", "body must be a JSON object"))?;
    let action = match obj.get("action") {
        None => return Err(ApiError::validation("action", "missing field `action`")),
        Some(Value::String(a)) => a.as_str(),
        Some(_) => return Err(ApiError::validation("action", "`action` must be a string")),
    };
    let class_name = match obj.get("class_name") {
        None | Some(Value::Null) => None,
        Some(Value::String(c)) => Some(c.trim().to_string()),
        Some(_) => return Err(ApiError::validation("class_name", "`class_name` must be a string")),
    };
    match action {
        "label" => match class_name {
            Some(c) if !c.is_empty() => Ok(Verdict::Label { class_name: c }),
            Some(_) => Err(ApiError::validation("class_name", "`class_name` must not be empty")),
            None => Err(ApiError::validation("class_name", "`class_name` is required to label a group")),
        },
        "dismiss" => Ok(Verdict::Dismiss),
        other => Err(ApiError::validation(
            "action",
            format!("unknown action `{other}`, expected `label` or `dismiss`"),
        )),
    }
}

async fn verdict(
    State(hub): State<Arc<Hub>>,
    Path(raw): Path<String>,
    body: Bytes,
) -> ApiResult<crate::hub::VerdictResponse> {
    let gid = parse_gid(&raw)?;
    let verdict = parse_verdict(&body)?;
    Ok(Json(hub.stage(gid, verdict)?))
}

async fn confusion(State(hub): State<Arc<Hub>>) -> Json<ConfusionResponse> {
    let s = hub.read();
    Json(ConfusionResponse {
        step: s.step,
        confusion: s.evaluation.as_ref().map(|e| ConfusionView {
            classes: e.confusion.classes.clone(),
            counts: e.confusion.counts.clone(),
            normalized: e.confusion.normalized(),
            metrics: e.metrics,
        }),
    })
}

async fn projection(State(hub): State<Arc<Hub>>) -> Json<ProjectionResponse> {
    let s = hub.read();
    Json(ProjectionResponse {
        step: s.step,
        projection: s.projection.clone(),
    })
}
