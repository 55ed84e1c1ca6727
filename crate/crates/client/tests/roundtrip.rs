use std::net::SocketAddr;
use std::time::Duration;

use srmae_client::{Client, ClientError};
use srmae_core::run::{Command, JobOutput, JobRequest};
use srmae_core::train::Event;

async fn client() -> Client {
    let (addr, _task) = srmae_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let c = Client::new(format!("http://{addr}/"));
    c.wait_ready(Duration::from_secs(5)).await.unwrap();
    c
}

#[tokio::test]
async fn run_returns_output_and_every_event() {
    let c = client().await;
    let req = JobRequest {
        overrides: vec!["model.num_classes=10".into(), "data.test_size=50".into()],
        ..JobRequest::new(Command::Eval)
    };
    let mut seen = Vec::new();
    let out = c.run(&req, |e| seen.push(e.clone())).await.unwrap();
    let JobOutput::Eval { record, count } = out else { panic!("{out:?}") };
    assert_eq!(count, 50);
    assert_eq!(seen, vec![Event::Metric(record)]);
}

#[tokio::test]
async fn job_errors_map_to_exit_codes() {
    let c = client().await;
    let req = JobRequest {
        init: Some("/nonexistent/ckpt.srmk".into()),
        ..JobRequest::new(Command::Inspect)
    };
    let err = c.run(&req, |_| {}).await.unwrap_err();
    assert!(matches!(err, ClientError::Job(_)));
    assert_eq!(err.exit_code(), 4);
}

#[tokio::test]
async fn unreachable_server_is_an_io_failure() {
    let c = Client::new("http://127.0.0.1:1");
    let err = c.health().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)));
    assert_eq!(err.exit_code(), 4);
}
