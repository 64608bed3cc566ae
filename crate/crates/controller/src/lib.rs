//! Measurement controller daemon: OpenFlow listener, HTTP/JSON API and
//! deployment policy around the sans-IO controller, plus a network-attached
//! simulated switch for demos and end-to-end tests.

pub mod api;
pub mod config;
pub mod daemon;
pub mod policy;
pub mod simswitch;

use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use config::DaemonConfig;
pub use daemon::Daemon;

/// Listeners bound by [`bind`], with their actual addresses.
pub struct Bound {
    pub daemon: Arc<Daemon>,
    pub openflow: TcpListener,
    pub http: TcpListener,
}

impl Bound {
    pub fn openflow_addr(&self) -> std::io::Result<SocketAddr> {
        self.openflow.local_addr()
    }

    pub fn http_addr(&self) -> std::io::Result<SocketAddr> {
        self.http.local_addr()
    }

    /// Serves OpenFlow, HTTP and timers until `shutdown` resolves.
    pub async fn serve(self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
        let timers = tokio::spawn(Arc::clone(&self.daemon).run_timers());
        let openflow = tokio::spawn(Arc::clone(&self.daemon).serve_openflow(self.openflow));
        let app = api::router(Arc::clone(&self.daemon));
        let result = axum::serve(self.http, app).with_graceful_shutdown(shutdown).await;
        timers.abort();
        openflow.abort();
        Ok(result?)
    }
}

pub async fn bind(config: DaemonConfig) -> anyhow::Result<Bound> {
    let openflow = TcpListener::bind(config.listen.openflow).await?;
    let http = TcpListener::bind(config.listen.http).await?;
    let daemon = Daemon::new(config)?;
    Ok(Bound { daemon, openflow, http })
}
