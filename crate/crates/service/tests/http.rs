use std::net::SocketAddr;

use serde_json::{json, Value};
use srmae_core::run::api::{EventPage, Health, JobState, JobStatus, Submitted};
use srmae_core::run::JobOutput;
use srmae_core::train::Event;

async fn server() -> String {
    let (addr, _task) = srmae_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    format!("http://{addr}")
}

async fn wait_done(http: &reqwest::Client, base: &str, id: u64) -> (Vec<Event>, JobStatus) {
    let mut from = 0;
    let mut events = Vec::new();
    loop {
        let page: EventPage = http
            .get(format!("{base}/v1/jobs/{id}/events?from={from}&wait_ms=1000"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(page.next, from + page.events.len());
        from = page.next;
        events.extend(page.events);
        if page.done {
            break;
        }
    }
    let status = http.get(format!("{base}/v1/jobs/{id}")).send().await.unwrap().json().await.unwrap();
    (events, status)
}

#[tokio::test]
async fn health_reports_version() {
    let base = server().await;
    let h: Health = reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.version, env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn training_job_streams_metrics_then_succeeds() {
    let base = server().await;
    let dir = tempfile::tempdir().unwrap();
    let http = reqwest::Client::new();
    let body = json!({
        "command": "pretrain",
        "config": "model.image_height = 16\nmodel.image_width = 16\nmodel.patch_size = 4\ndata.train_size = 16\n",
        "overrides": ["train.epochs=2", "train.warmup_epochs=0", "train.batch_size=8"],
        "out": dir.path(),
    });
    let resp = http.post(format!("{base}/v1/jobs")).json(&body).send().await.unwrap();
    assert_eq!(resp.status(), 202);
    let Submitted { id } = resp.json().await.unwrap();

    let (events, status) = wait_done(&http, &base, id).await;
    assert_eq!(status.state, JobState::Succeeded);
    assert_eq!(status.events, events.len());
    let steps = events
        .iter()
        .filter(|e| matches!(e, Event::Metric(r) if r.phase == "pretrain"))
        .count();
    assert_eq!(steps, 4);
    assert!(matches!(status.output, Some(JobOutput::Train { .. })));
    assert!(dir.path().join("metrics.ndjson").exists());
}

#[tokio::test]
async fn failed_job_carries_its_exit_code() {
    let base = server().await;
    let http = reqwest::Client::new();
    let body = json!({"command": "pretrain", "overrides": ["model.nope=1"]});
    let Submitted { id } = http.post(format!("{base}/v1/jobs")).json(&body).send().await.unwrap().json().await.unwrap();
    let (_, status) = wait_done(&http, &base, id).await;
    assert_eq!(status.state, JobState::Failed);
    let err = status.error.unwrap();
    assert_eq!((err.kind.as_str(), err.exit_code), ("config", 2));
    assert!(err.message.contains("model.nope"));
}

#[tokio::test]
async fn unknown_job_is_404_and_bad_body_is_rejected() {
    let base = server().await;
    let http = reqwest::Client::new();
    let resp = http.get(format!("{base}/v1/jobs/999")).send().await.unwrap();
    assert_eq!(resp.status(), 404);
    let v: Value = resp.json().await.unwrap();
    assert_eq!(v["kind"], "not_found");

    let resp = http.post(format!("{base}/v1/jobs")).json(&json!({"command": "dance"})).send().await.unwrap();
    assert!(resp.status().is_client_error());
}
