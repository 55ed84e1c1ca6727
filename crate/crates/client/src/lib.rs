//! Thin async client for the srmae job service.

use std::time::Duration;

use srmae_core::run::api::{ApiError, EventPage, Health, JobState, JobStatus, Submitted, HEALTH_PATH, JOBS_PATH};
use srmae_core::run::{JobOutput, JobRequest};
use srmae_core::train::Event;

/// How long each events request may block server-side.
const POLL_WAIT_MS: u64 = 2_000;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach the job service: {0}")]
    Transport(#[from] reqwest::Error),
    #[error(transparent)]
    Job(#[from] ApiError),
    #[error("unexpected reply from the job service: {0}")]
    Protocol(String),
}

impl ClientError {
    /// The process exit code a command-line front end should use.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Job(e) => e.exit_code,
            ClientError::Transport(_) | ClientError::Protocol(_) => srmae_core::error::exit_code::IO,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn get<R: serde::de::DeserializeOwned>(&self, path: &str) -> Result<R> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        decode(resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get(HEALTH_PATH).await
    }

    pub async fn submit(&self, req: &JobRequest) -> Result<u64> {
        let resp = self.http.post(format!("{}{JOBS_PATH}", self.base)).json(req).send().await?;
        Ok(decode::<Submitted>(resp).await?.id)
    }

    pub async fn status(&self, id: u64) -> Result<JobStatus> {
        self.get(&format!("{JOBS_PATH}/{id}")).await
    }

    /// Events from index `from`, waiting up to `wait_ms` for new ones.
    pub async fn events(&self, id: u64, from: usize, wait_ms: u64) -> Result<EventPage> {
        self.get(&format!("{JOBS_PATH}/{id}/events?from={from}&wait_ms={wait_ms}")).await
    }

    /// Submits `req`, feeds every event to `on_event` in order, and returns
    /// the job's output or its error.
    pub async fn run(&self, req: &JobRequest, mut on_event: impl FnMut(&Event)) -> Result<JobOutput> {
        let id = self.submit(req).await?;
        let mut from = 0;
        loop {
            let page = self.events(id, from, POLL_WAIT_MS).await?;
            page.events.iter().for_each(&mut on_event);
            from = page.next;
            if page.done {
                break;
            }
        }
        let status = self.status(id).await?;
        match (status.state, status.output, status.error) {
            (JobState::Succeeded, Some(out), _) => Ok(out),
            (JobState::Failed, _, Some(err)) => Err(err.into()),
            (state, ..) => Err(ClientError::Protocol(format!("job {id} finished in state {state:?}"))),
        }
    }

    /// Polls `/health` until the server answers or `timeout` elapses.
    pub async fn wait_ready(&self, timeout: Duration) -> Result<Health> {
        let start = std::time::Instant::now();
        loop {
            match self.health().await {
                Ok(h) => return Ok(h),
                Err(e) if start.elapsed() >= timeout => return Err(e),
                Err(_) => tokio::time::sleep(Duration::from_millis(50)).await,
            }
        }
    }
}

async fn decode<R: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<R> {
    let status = resp.status();
    let bytes = resp.bytes().await?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol(e.to_string()));
    }
    match serde_json::from_slice::<ApiError>(&bytes) {
        Ok(e) => Err(e.into()),
        Err(_) => Err(ClientError::Protocol(format!(
            "HTTP {status}: {}",
            String::from_utf8_lossy(&bytes)
        ))),
    }
}
