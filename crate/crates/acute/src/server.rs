//! HTTP task service.

use std::future::Future;
use std::sync::Arc;

use acute_core::corpus::{Conversation, Corpus, Question, QuestionRegistry};
use acute_core::pairing::Plan;
use acute_core::run::{Progress, RunError, RunSettings, TaskPayload};
use acute_core::workers::{AssignError, SubmitError, Submission};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::store::{run_start, RunStore, StoreError};

/// Body of `POST /runs`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StartRequest {
    pub plan: Plan,
    /// Must include every conversation the plan references.
    pub conversations: Vec<Conversation>,
    /// Custom questions; the built-in ones are always available.
    #[serde(default)]
    pub questions: Vec<Question>,
    #[serde(default)]
    pub settings: Option<RunSettings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartResponse {
    pub run_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskResponse {
    Task { task: TaskPayload },
    NoTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubmitResponse {
    Accepted {
        annotation_id: String,
        completed: usize,
    },
    Rejected {
        code: String,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub run_id: String,
    #[serde(flatten)]
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    worker: String,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl ToString) -> Self {
        ApiError(
            status,
            ErrorBody {
                code: code.into(),
                message: message.to_string(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

/// Rejection code for a refused submission, if the error is one.
pub fn rejection_code(err: &SubmitError) -> &'static str {
    match err {
        SubmitError::UnknownWorker(_) => "UNKNOWN_WORKER",
        SubmitError::Unassigned(_) => "UNASSIGNED",
        SubmitError::Duplicate(_) => "DUPLICATE",
        SubmitError::Deadline(_) => "DEADLINE",
        SubmitError::Closed => "CLOSED",
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        use StatusCode as S;
        match &e {
            StoreError::UnknownRun(_) => ApiError::new(S::NOT_FOUND, "UNKNOWN_RUN", e),
            StoreError::DuplicateRun(_) => ApiError::new(S::CONFLICT, "DUPLICATE_RUN", e),
            StoreError::InvalidRunId(_) => ApiError::new(S::BAD_REQUEST, "INVALID_RUN_ID", e),
            StoreError::Run(RunError::Assign(AssignError::Closed)) => {
                ApiError::new(S::CONFLICT, "CLOSED", e)
            }
            StoreError::Run(RunError::Submit(s)) => ApiError::new(S::CONFLICT, rejection_code(s), e),
            StoreError::Run(
                RunError::MissingConversation(_)
                | RunError::MissingQuestion(_)
                | RunError::MalformedMatchup(_),
            ) => ApiError::new(S::BAD_REQUEST, "INVALID_PLAN", e),
            StoreError::Run(_) | StoreError::Io(_) => {
                log::error!("{e}");
                ApiError::new(S::INTERNAL_SERVER_ERROR, "INTERNAL", e)
            }
        }
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StoreError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e))?
        .map_err(ApiError::from)
}

async fn start_run(
    State(store): State<Arc<RunStore>>,
    Json(req): Json<StartRequest>,
) -> Result<(StatusCode, Json<StartResponse>), ApiError> {
    let mut registry = QuestionRegistry::with_builtins();
    for q in req.questions {
        if !registry.contains(&q.question_id) {
            registry
                .register(q)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_QUESTION", e))?;
        }
    }
    let corpus = Corpus::from_conversations(req.conversations)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_CORPUS", e))?;
    let settings = req
        .settings
        .unwrap_or_else(|| RunSettings::for_plan(&req.plan));
    let start = run_start(req.plan, &corpus, &registry, settings).map_err(StoreError::from)?;
    let run_id = blocking(move || store.create(start)).await?;
    log::info!("started run {run_id}");
    Ok((StatusCode::CREATED, Json(StartResponse { run_id })))
}

async fn fetch_task(
    State(store): State<Arc<RunStore>>,
    Path(id): Path<String>,
    Query(q): Query<TaskQuery>,
) -> Result<Json<TaskResponse>, ApiError> {
    if q.worker.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "INVALID_WORKER", "worker id is empty"));
    }
    let task = blocking(move || store.fetch_task(&id, &q.worker)).await?;
    Ok(Json(match task {
        Some(task) => TaskResponse::Task { task },
        None => TaskResponse::NoTask,
    }))
}

async fn submit(
    State(store): State<Arc<RunStore>>,
    Path(id): Path<String>,
    Json(sub): Json<Submission>,
) -> Response {
    match blocking(move || store.submit(&id, sub)).await {
        Ok(ack) => Json(SubmitResponse::Accepted {
            annotation_id: ack.annotation_id,
            completed: ack.completed,
        })
        .into_response(),
        Err(ApiError(status, body)) if status == StatusCode::CONFLICT => (
            status,
            Json(SubmitResponse::Rejected {
                code: body.code,
                message: body.message,
            }),
        )
            .into_response(),
        Err(e) => e.into_response(),
    }
}

async fn report(
    State(store): State<Arc<RunStore>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let report = blocking(move || store.report(&id)).await?;
    Ok(Json(report).into_response())
}

async fn status(
    State(store): State<Arc<RunStore>>,
    Path(id): Path<String>,
) -> Result<Json<StatusResponse>, ApiError> {
    let run_id = id.clone();
    let progress = blocking(move || store.status(&id)).await?;
    Ok(Json(StatusResponse { run_id, progress }))
}

async fn close(
    State(store): State<Arc<RunStore>>,
    Path(id): Path<String>,
) -> Result<Json<StatusResponse>, ApiError> {
    let run_id = id.clone();
    let progress = blocking(move || store.close(&id)).await?;
    log::info!("closed run {run_id}");
    Ok(Json(StatusResponse { run_id, progress }))
}

pub fn router(store: Arc<RunStore>) -> Router {
    Router::new()
        .route("/runs", post(start_run))
        .route("/runs/{id}/task", get(fetch_task))
        .route("/runs/{id}/annotations", post(submit))
        .route("/runs/{id}/report", get(report))
        .route("/runs/{id}/status", get(status))
        .route("/runs/{id}/close", post(close))
        .with_state(store)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    store: Arc<RunStore>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store))
        .with_graceful_shutdown(shutdown)
        .await
}
