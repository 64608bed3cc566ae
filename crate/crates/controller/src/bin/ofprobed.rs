use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use log::info;
use ofprobe_controller::DaemonConfig;

/// OpenFlow measurement controller: accepts switch connections and serves the
/// HTTP/JSON measurement API.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML config file; built-in defaults when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides listen.openflow.
    #[arg(long)]
    openflow_listen: Option<SocketAddr>,
    /// Overrides listen.http.
    #[arg(long)]
    http_listen: Option<SocketAddr>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut config = match &args.config {
        Some(path) => DaemonConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => DaemonConfig::default(),
    };
    if let Some(a) = args.openflow_listen {
        config.listen.openflow = a;
    }
    if let Some(a) = args.http_listen {
        config.listen.http = a;
    }
    let bound = ofprobe_controller::bind(config).await?;
    info!("openflow on {}, http on {}", bound.openflow_addr()?, bound.http_addr()?);
    bound
        .serve(async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        })
        .await
}
