//! HTTP+JSON front end for [`TaskService`].
//!
//! | method | path | purpose |
//! |---|---|---|
//! | GET | `/tasks?worker=ID` | fetch a task for a worker |
//! | POST | `/tasks/{assignment}/result` | submit a result |
//! | POST | `/stories` | create a story |
//! | GET | `/stories` | list stories |
//! | GET | `/stories/{id}` | story status |
//! | GET | `/stories/{id}/versions/{n}` | export a version (`latest` works too) |
//! | GET | `/stories/{id}/events` | the story's event log as NDJSON |
//!
//! Errors are `{"code": ..., "field": ..., "message": ...}` with the
//! service's reason codes.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use storyloop_core::domain::{AssignmentId, StoryConfig, StoryId, WorkerId};
use storyloop_core::engine::TaskSpec;
use storyloop_core::service::{
    Assignment, Rejection, ServiceError, SubmissionPayload, TaskService,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(
        status: StatusCode,
        code: &str,
        field: Option<&str>,
        message: impl Into<String>,
    ) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_owned(),
                field: field.map(str::to_owned),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad-request", None, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<Rejection> for ApiError {
    fn from(r: Rejection) -> Self {
        let status = match r {
            Rejection::UnknownAssignment => StatusCode::NOT_FOUND,
            Rejection::NotAssignee | Rejection::ConditionMismatch | Rejection::SelfVote => {
                StatusCode::FORBIDDEN
            }
            Rejection::DuplicateSubmission => StatusCode::CONFLICT,
            Rejection::ExpiredAssignment => StatusCode::GONE,
            Rejection::KindMismatch { .. } | Rejection::ValidationFailure { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Rejection::StorageFailure(_) | Rejection::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError::new(status, r.code(), r.field(), r.to_string())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::UnknownStory(_) | ServiceError::Export(_) => StatusCode::NOT_FOUND,
            ServiceError::InvalidStory(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.field(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct FetchQuery {
    pub worker: WorkerId,
}

/// Body of `GET /tasks`; both fields are null when nothing is eligible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchResponse {
    pub task: Option<TaskSpec>,
    pub assignment: Option<Assignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub worker: WorkerId,
    pub payload: SubmissionPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateStoryRequest {
    pub prompt: String,
    /// Missing fields take the server's defaults.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    /// A pre-written first draft; the story starts at revision.
    #[serde(default)]
    pub draft: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateStoryResponse {
    pub story_id: StoryId,
}

#[derive(Clone)]
struct AppState {
    service: Arc<TaskService>,
    defaults: Arc<StoryConfig>,
}

/// Routes over `service`. `defaults` fills config fields a create request
/// leaves out.
pub fn router(service: Arc<TaskService>, defaults: StoryConfig) -> Router {
    Router::new()
        .route("/tasks", get(fetch_task))
        .route("/tasks/{assignment}/result", post(submit_result))
        .route("/stories", post(create_story).get(list_stories))
        .route("/stories/{id}", get(story_status))
        .route("/stories/{id}/versions/{n}", get(export_version))
        .route("/stories/{id}/events", get(story_events))
        .with_state(AppState {
            service,
            defaults: Arc::new(defaults),
        })
}

async fn fetch_task(
    State(app): State<AppState>,
    query: Result<Query<FetchQuery>, QueryRejection>,
) -> Result<Json<FetchResponse>, ApiError> {
    let Query(q) = query?;
    if q.worker.as_str().trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad-request",
            Some("worker"),
            "worker id is empty",
        ));
    }
    let fetched = app.service.fetch_task(&q.worker)?;
    Ok(Json(match fetched {
        Some((task, assignment)) => FetchResponse {
            task: Some(task),
            assignment: Some(assignment),
        },
        None => FetchResponse {
            task: None,
            assignment: None,
        },
    }))
}

async fn submit_result(
    State(app): State<AppState>,
    Path(assignment): Path<AssignmentId>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let accepted = app
        .service
        .submit_result(&req.worker, &assignment, req.payload)?;
    Ok(Json(accepted).into_response())
}

/// Overlays the request's partial config onto the defaults.
fn merge_config(
    defaults: &StoryConfig,
    partial: Option<serde_json::Value>,
) -> Result<StoryConfig, ApiError> {
    let Some(partial) = partial else {
        return Ok(defaults.clone());
    };
    let serde_json::Value::Object(fields) = partial else {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad-request",
            Some("config"),
            "config must be an object",
        ));
    };
    let mut base = serde_json::to_value(defaults).expect("config serializes");
    let obj = base.as_object_mut().expect("config is an object");
    for (k, v) in fields {
        obj.insert(k, v);
    }
    serde_json::from_value(base).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid-config",
            Some("config"),
            e.to_string(),
        )
    })
}

async fn create_story(
    State(app): State<AppState>,
    body: Result<Json<CreateStoryRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let config = merge_config(&app.defaults, req.config)?;
    let story_id = match req.draft {
        Some(draft) => app
            .service
            .create_seeded_story(&req.prompt, config, draft)?,
        None => app.service.create_story(&req.prompt, config)?,
    };
    Ok((StatusCode::CREATED, Json(CreateStoryResponse { story_id })).into_response())
}

async fn list_stories(State(app): State<AppState>) -> Response {
    Json(app.service.list_stories()).into_response()
}

async fn story_status(
    State(app): State<AppState>,
    Path(id): Path<StoryId>,
) -> Result<Response, ApiError> {
    Ok(Json(app.service.story_status(&id)?).into_response())
}

async fn export_version(
    State(app): State<AppState>,
    Path((id, n)): Path<(StoryId, String)>,
) -> Result<Response, ApiError> {
    let version = match n.as_str() {
        "latest" => None,
        other => Some(other.parse::<u32>().map_err(|_| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad-request",
                Some("version"),
                format!("`{other}` is not a version number"),
            )
        })?),
    };
    Ok(Json(app.service.export_story(&id, version)?).into_response())
}

async fn story_events(
    State(app): State<AppState>,
    Path(id): Path<StoryId>,
) -> Result<Response, ApiError> {
    let mut body = String::new();
    for event in app.service.events(&id)? {
        body.push_str(&event.to_line());
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
