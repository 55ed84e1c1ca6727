//! `srmae`: command-line front end for the job service.
//!
//! Without `--server` each invocation starts an in-process service on a
//! loopback port and submits its job there, so the exit-code contract is the
//! same whether a job runs locally or remotely.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srmae_client::{Client, ClientError};
use srmae_core::error::exit_code;
use srmae_core::run::{Command, JobOutput, JobRequest};
use srmae_core::tensor::DType;
use srmae_core::train::Event;

#[derive(Parser)]
#[command(name = "srmae", version, about = "Super-resolution masked autoencoders: pretrain, fine-tune, evaluate")]
struct Cli {
    /// Job service to submit to; an in-process one is started when absent.
    #[arg(long, global = true, env = "SRMAE_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked super-resolution pretraining.
    Pretrain(RunArgs),
    /// Supervised fine-tuning, optionally from a pretraining checkpoint.
    Finetune(RunArgs),
    /// Top-1/top-5 accuracy of a fine-tuned checkpoint.
    Eval(RunArgs),
    /// Finite-difference check of every op and the pretraining loss.
    Gradcheck(GradcheckArgs),
    /// Original | masked view with low-resolution clues | prediction.
    Reconstruct(ReconstructArgs),
    /// Summarize a checkpoint, manifest or config file.
    Inspect { path: PathBuf },
    /// Run the job service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: SocketAddr,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<DType>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to start from (or to evaluate).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corrupt the reverse rule of one op (harness self-test).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pretraining checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Netpbm or raw-tensor file, a directory of them, or an idx prefix
    /// [default: the configured held-out split].
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    match s {
        "float32" => Ok(DType::Float32),
        "float64" => Ok(DType::Float64),
        _ => Err(format!("expected float32 or float64, got `{s}`")),
    }
}

/// Paths travel to the service, which may run elsewhere in the tree.
fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn request(command: Command, args: ConfigArgs) -> Result<JobRequest, Failure> {
    let config = match &args.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Failure {
            code: exit_code::IO,
            message: format!("cannot read config {}: {e}", p.display()),
        })?),
        None => None,
    };
    Ok(JobRequest {
        config,
        config_path: args.config.as_ref().map(|p| p.display().to_string()),
        overrides: args.overrides,
        seed: args.seed,
        dtype: args.dtype,
        ..JobRequest::new(command)
    })
}

fn build(cmd: Cmd) -> Result<JobRequest, Failure> {
    let opt = |p: Option<PathBuf>| p.as_deref().map(absolute);
    Ok(match cmd {
        Cmd::Pretrain(a) => run_request(Command::Pretrain, a)?,
        Cmd::Finetune(a) => run_request(Command::Finetune, a)?,
        Cmd::Eval(a) => run_request(Command::Eval, a)?,
        Cmd::Gradcheck(a) => JobRequest {
            inject_fault: a.inject_fault,
            ..request(Command::Gradcheck, a.config)?
        },
        Cmd::Reconstruct(a) => JobRequest {
            init: Some(absolute(&a.checkpoint)),
            images: opt(a.images),
            out: opt(a.out),
            ..request(Command::Reconstruct, a.config)?
        },
        Cmd::Inspect { path } => JobRequest {
            init: Some(absolute(&path)),
            ..JobRequest::new(Command::Inspect)
        },
        Cmd::Serve { .. } => unreachable!("serve is handled before building a job"),
    })
}

fn run_request(command: Command, a: RunArgs) -> Result<JobRequest, Failure> {
    let out = a.out.unwrap_or_else(|| PathBuf::from("runs").join(command.name()));
    Ok(JobRequest {
        init: a.init.as_deref().map(absolute),
        out: Some(absolute(&out)),
        ..request(command, a.config)?
    })
}

struct Failure {
    code: i32,
    message: String,
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

/// Prints a stdout line, ignoring a closed pipe (e.g. `srmae ... | head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn print_event(e: &Event) {
    match e {
        Event::Note(n) => out!("{n}"),
        // Per-step records stay in metrics.ndjson; the console gets summaries.
        Event::Metric(r) if r.phase.ends_with("_epoch") || r.phase == "eval" => {
            out!("{}", serde_json::to_string(r).expect("metric record serializes"))
        }
        Event::Metric(_) => {}
    }
}

fn print_output(out: &JobOutput) {
    match out {
        JobOutput::Train { out, checkpoint, .. } => {
            out!("run directory: {}", out.display());
            out!("final checkpoint: {}", checkpoint.display());
        }
        JobOutput::Eval { count, .. } => out!("evaluated {count} images"),
        JobOutput::Gradcheck { entries, tolerance, .. } => {
            out!("all {} ops within {tolerance:.0e}", entries.len())
        }
        JobOutput::Reconstruct { files, .. } => {
            for f in files {
                out!("{}", f.display());
            }
        }
        JobOutput::Inspect { summary } => {
            out!("{}", serde_json::to_string_pretty(summary).expect("summary serializes"))
        }
    }
}

async fn execute(server: Option<String>, req: JobRequest) -> Result<(), Failure> {
    let base = match server {
        Some(url) => url,
        None => {
            let (addr, _task) = srmae_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0)))
                .await
                .map_err(|e| Failure {
                    code: exit_code::IO,
                    message: format!("cannot start the embedded job service: {e}"),
                })?;
            format!("http://{addr}")
        }
    };
    let client = Client::new(base);
    let out = client.run(&req, print_event).await?;
    print_output(&out);
    Ok(())
}

async fn serve(addr: SocketAddr) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure {
        code: exit_code::IO,
        message: e.to_string(),
    };
    let (addr, task) = srmae_service::spawn(addr).await.map_err(io)?;
    eprintln!("listening on http://{addr}");
    task.await.map_err(|e| io(std::io::Error::other(e)))?.map_err(io)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Serve { addr } => serve(addr).await,
        other => match build(other) {
            Ok(req) => execute(cli.server, req).await,
            Err(f) => Err(f),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
