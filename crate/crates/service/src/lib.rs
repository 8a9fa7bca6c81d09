//! HTTP API over the session service, plus static hosting for the console.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use testgenie_core::evaluation::{ErrorKind, ErrorLabel, SemanticSub};
use testgenie_core::evaluation::render_table;
use testgenie_core::exec_orchestrator::ExecError;
use testgenie_core::prompt_forge::PromptLevel;
use testgenie_core::session::{NewSession, SessionError};
use testgenie_core::Service;
use tower_http::services::{ServeDir, ServeFile};

pub const DEFAULT_KS: &str = "1,2,3";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownSession(_) | SessionError::UnknownAttempt { .. } => StatusCode::NOT_FOUND,
            SessionError::UnknownSpec(_)
            | SessionError::UnknownModel(_)
            | SessionError::EmptyRequirement
            | SessionError::NoAttempts
            | SessionError::Prompt(_)
            | SessionError::Eval(_) => StatusCode::BAD_REQUEST,
            SessionError::NothingToRefactor(_) => StatusCode::CONFLICT,
            SessionError::Gateway(_) | SessionError::Rag(_) => StatusCode::BAD_GATEWAY,
            SessionError::Exec(ExecError::SandboxMissing(_)) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type AppState = Arc<Service>;

/// Run a blocking service call off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, SessionError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("worker failed: {e}"),
        }),
    }
}

#[derive(Debug, Deserialize)]
pub struct ExecuteBody {
    pub attempt: u32,
    #[serde(default)]
    pub code: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct RefactorBody {
    #[serde(default)]
    pub instruction: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct AnnotateBody {
    pub attempt: u32,
    pub label: String,
    #[serde(default)]
    pub semantic_sub: Option<String>,
    pub prompt_level: String,
}

impl AnnotateBody {
    fn parse(&self) -> Result<(ErrorLabel, PromptLevel), ApiError> {
        let kind: ErrorKind = self.label.parse().map_err(|e| ApiError::bad_request(format!("{e}")))?;
        let sub = match self.semantic_sub.as_deref().filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse::<SemanticSub>().map_err(|e| ApiError::bad_request(format!("{e}")))?),
            None => None,
        };
        let label = ErrorLabel::new(kind, sub).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let level = self
            .prompt_level
            .parse()
            .map_err(|e| ApiError::bad_request(format!("{e}")))?;
        Ok((label, level))
    }
}

#[derive(Debug, Deserialize)]
pub struct MetricsQuery {
    #[serde(default)]
    pub k: Option<String>,
}

/// `"1,2,3"` into k values.
pub fn parse_ks(text: &str) -> Result<Vec<u64>, String> {
    let ks: Vec<u64> = text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<u64>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(format!("invalid k `{s}`")),
        })
        .collect::<Result<_, _>>()?;
    if ks.is_empty() {
        return Err("no k values".into());
    }
    Ok(ks)
}

#[derive(Debug, Serialize)]
struct MetricsBody {
    #[serde(flatten)]
    report: testgenie_core::ServiceMetrics,
    table: String,
}

async fn list_specs(State(svc): State<AppState>) -> Json<serde_json::Value> {
    Json(json!(svc.specs().list()))
}

async fn create_session(
    State(svc): State<AppState>,
    body: Result<Json<NewSession>, JsonRejection>,
) -> Result<(StatusCode, Json<testgenie_core::session::Session>), ApiError> {
    let Json(new) = body?;
    let s = blocking(move || svc.create(new)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_session(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<testgenie_core::session::Session> {
    Ok(Json(blocking(move || svc.get(&id)).await?))
}

async fn generate(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<testgenie_core::evaluation::RunRecord> {
    Ok(Json(blocking(move || svc.generate(&id)).await?))
}

async fn execute(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ExecuteBody>, JsonRejection>,
) -> ApiResult<testgenie_core::session::ExecuteResult> {
    let Json(b) = body?;
    Ok(Json(blocking(move || svc.execute(&id, b.attempt, b.code)).await?))
}

async fn refactor(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<RefactorBody>>,
) -> ApiResult<testgenie_core::evaluation::RunRecord> {
    let instruction = body.and_then(|Json(b)| b.instruction).unwrap_or_default();
    Ok(Json(blocking(move || svc.refactor(&id, &instruction)).await?))
}

async fn annotate(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AnnotateBody>, JsonRejection>,
) -> ApiResult<testgenie_core::evaluation::RunRecord> {
    let Json(b) = body?;
    let (label, level) = b.parse()?;
    Ok(Json(blocking(move || svc.annotate(&id, b.attempt, label, level)).await?))
}

async fn metrics(State(svc): State<AppState>, Query(q): Query<MetricsQuery>) -> Result<Response, ApiError> {
    let ks = parse_ks(q.k.as_deref().unwrap_or(DEFAULT_KS)).map_err(ApiError::bad_request)?;
    let report = blocking(move || svc.metrics(&ks)).await?;
    let table = render_table(&report.summary);
    Ok(Json(MetricsBody { report, table }).into_response())
}

/// The API routes, and the console's static files when `static_dir` is
/// given (unknown paths fall back to its `index.html`).
pub fn router(service: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/specs", get(list_specs))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/generate", post(generate))
        .route("/api/sessions/{id}/execute", post(execute))
        .route("/api/sessions/{id}/refactor", post(refactor))
        .route("/api/sessions/{id}/annotate", post(annotate))
        .route("/api/metrics", get(metrics))
        .with_state(service);
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
