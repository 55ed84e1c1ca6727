use std::net::SocketAddr;

use clap::Parser;

/// Serve srmae jobs over HTTP/JSON.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "SRMAE_ADDR", default_value = "127.0.0.1:7878")]
    addr: SocketAddr,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let args = Args::parse();
    let (addr, task) = srmae_service::spawn(args.addr).await?;
    tracing::info!(%addr, "listening");
    task.await.map_err(std::io::Error::other)?
}
