//! HTTP/JSON job service.
//!
//! ```text
//! GET  /health                         liveness and version
//! POST /v1/jobs                        submit a JobRequest, returns {id}
//! GET  /v1/jobs/{id}                   state, output or error
//! GET  /v1/jobs/{id}/events?from=N     events from index N (long-polls)
//! ```
//!
//! Jobs run on the blocking pool; their metric records and notes are kept in
//! memory so clients can stream them while the job runs.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use srmae_core::run::api::{ApiError, EventPage, Health, JobState, JobStatus, Submitted, HEALTH_PATH, JOBS_PATH};
use srmae_core::run::{run_job, JobOutput, JobRequest};
use srmae_core::train::{init_thread_pool, Event};
use tokio::net::TcpListener;
use tokio::sync::Notify;

/// Upper bound on how long an events request waits for something new.
const MAX_WAIT: Duration = Duration::from_secs(10);

struct Job {
    request: JobRequest,
    events: Vec<Event>,
    result: Option<Result<JobOutput, ApiError>>,
}

struct Slot {
    job: Mutex<Job>,
    changed: Notify,
}

#[derive(Default)]
struct Jobs {
    next_id: AtomicU64,
    slots: Mutex<HashMap<u64, Arc<Slot>>>,
}

#[derive(Clone, Default)]
pub struct AppState {
    jobs: Arc<Jobs>,
}

impl AppState {
    fn slot(&self, id: u64) -> Result<Arc<Slot>, NotFound> {
        self.jobs.slots.lock().expect("job table").get(&id).cloned().ok_or(NotFound(id))
    }
}

struct NotFound(u64);

impl IntoResponse for NotFound {
    fn into_response(self) -> Response {
        let body = ApiError {
            kind: "not_found".into(),
            exit_code: srmae_core::error::exit_code::IO,
            message: format!("no job with id {}", self.0),
        };
        (StatusCode::NOT_FOUND, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route(HEALTH_PATH, get(health))
        .route(JOBS_PATH, post(submit))
        .route(&format!("{JOBS_PATH}/{{id}}"), get(status))
        .route(&format!("{JOBS_PATH}/{{id}}/events"), get(events))
        .with_state(state)
}

/// Binds `addr` and serves until the process exits. Returns the bound
/// address (useful with port 0) and the server task.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    init_thread_pool();
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(AppState::default());
    let task = tokio::spawn(async move { axum::serve(listener, app).await });
    Ok((local, task))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn submit(State(state): State<AppState>, Json(request): Json<JobRequest>) -> (StatusCode, Json<Submitted>) {
    let id = state.jobs.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let slot = Arc::new(Slot {
        job: Mutex::new(Job {
            request: request.clone(),
            events: Vec::new(),
            result: None,
        }),
        changed: Notify::new(),
    });
    state.jobs.slots.lock().expect("job table").insert(id, slot.clone());
    tracing::info!(id, command = request.command.name(), "job submitted");

    tokio::task::spawn_blocking(move || {
        let feed = slot.clone();
        let observer = Box::new(move |e: &Event| {
            feed.job.lock().expect("job").events.push(e.clone());
            feed.changed.notify_waiters();
        });
        let result = run_job(&request, Some(observer)).map_err(|e| ApiError::from(&e));
        if let Err(e) = &result {
            tracing::warn!(id, error = %e, "job failed");
        }
        slot.job.lock().expect("job").result = Some(result);
        slot.changed.notify_waiters();
    });
    (StatusCode::ACCEPTED, Json(Submitted { id }))
}

fn snapshot(id: u64, job: &Job) -> JobStatus {
    let (state, output, error) = match &job.result {
        None => (JobState::Running, None, None),
        Some(Ok(o)) => (JobState::Succeeded, Some(o.clone()), None),
        Some(Err(e)) => (JobState::Failed, None, Some(e.clone())),
    };
    JobStatus {
        id,
        command: job.request.command,
        state,
        events: job.events.len(),
        output,
        error,
    }
}

async fn status(State(state): State<AppState>, Path(id): Path<u64>) -> Result<Json<JobStatus>, NotFound> {
    let slot = state.slot(id)?;
    let job = slot.job.lock().expect("job");
    Ok(Json(snapshot(id, &job)))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: usize,
    /// Milliseconds to wait for new events before answering with none.
    #[serde(default)]
    wait_ms: u64,
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Query(q): Query<EventsQuery>,
) -> Result<Json<EventPage>, NotFound> {
    let slot = state.slot(id)?;
    let deadline = tokio::time::Instant::now() + Duration::from_millis(q.wait_ms).min(MAX_WAIT);
    loop {
        // Register for wakeups before looking, so a change in between is not lost.
        let changed = slot.changed.notified();
        tokio::pin!(changed);
        changed.as_mut().enable();
        {
            let job = slot.job.lock().expect("job");
            let done = job.result.is_some();
            let from = q.from.min(job.events.len());
            if from < job.events.len() || done || tokio::time::Instant::now() >= deadline {
                return Ok(Json(EventPage {
                    events: job.events[from..].to_vec(),
                    next: job.events.len(),
                    done,
                }));
            }
        }
        let _ = tokio::time::timeout_at(deadline, changed).await;
    }
}
