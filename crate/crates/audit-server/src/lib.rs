//! HTTP front end for an [`AuditStore`].
//!
//! | Method | Path | Success | Errors |
//! |---|---|---|---|
//! | GET | `/api/tasks/next?annotator=<id>` | 200 task view, 204 when done | 403 unknown annotator |
//! | POST | `/api/annotations` | 201 stored annotation | 403, 404 unknown task, 409 duplicate |
//! | GET | `/api/report` | 200 alignment report | |
//! | GET | `/api/progress` | 200 progress counts | |

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use forge_core::audit::{render_report, AlignmentReport, AnnotatorChoice, AuditError, AuditStore};

pub type SharedStore = Arc<Mutex<AuditStore>>;

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(submit))
        .route("/api/report", get(report))
        .route("/api/progress", get(progress))
        .with_state(store)
}

/// Serves until the process is stopped. Port 0 picks a free port; the bound
/// address is passed to `on_bound` before requests are accepted.
pub async fn serve(store: AuditStore, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(Arc::new(Mutex::new(store)))).await
}

fn lock(store: &SharedStore) -> MutexGuard<'_, AuditStore> {
    // a panic mid-request cannot leave the store half-written: the log append
    // happens before the in-memory insert
    store.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

struct ApiError(AuditError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            AuditError::UnknownAnnotator(_) => StatusCode::FORBIDDEN,
            AuditError::UnknownTask(_) => StatusCode::NOT_FOUND,
            AuditError::Duplicate { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "audit request failed");
        }
        (
            status,
            Json(ErrorBody {
                error: self.0.to_string(),
            }),
        )
            .into_response()
    }
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_task(State(store): State<SharedStore>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    match lock(&store).next_task(&q.annotator).map_err(ApiError)? {
        Some(view) => Ok(Json(view).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    pub annotator_id: String,
    pub choice: AnnotatorChoice,
}

async fn submit(State(store): State<SharedStore>, Json(s): Json<Submission>) -> Result<Response, ApiError> {
    let stored = lock(&store)
        .record_annotation(&s.task_id, &s.annotator_id, s.choice)
        .map_err(ApiError)?;
    Ok((StatusCode::CREATED, Json(stored)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportBody {
    #[serde(flatten)]
    pub report: AlignmentReport,
    /// The same rows as a Markdown table.
    pub table: String,
}

async fn report(State(store): State<SharedStore>) -> Json<ReportBody> {
    let report = lock(&store).report();
    let table = render_report(&report);
    Json(ReportBody { report, table })
}

async fn progress(State(store): State<SharedStore>) -> Response {
    Json(lock(&store).progress()).into_response()
}
