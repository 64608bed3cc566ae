//! The simulated switch on a real clock, dialing a controller over TCP.
//!
//! Simulated link and switch delays are added on top of the real socket, so
//! use loopback to keep the real part negligible.

use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use log::{info, warn};
use ofprobe_core::netsim::{SimError, SimSwitch, SimTopology, SwitchLogEntry, SwitchStats};
use ofprobe_core::{Clock, MonotonicClock};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

pub struct SimSwitchOptions {
    pub topology: SimTopology,
    pub seed: u64,
    pub controller: SocketAddr,
    /// CSV file receiving every switch timing observation as it happens.
    pub event_log: Option<PathBuf>,
}

struct LogSink {
    out: csv::Writer<BufWriter<File>>,
}

impl LogSink {
    fn create(path: &PathBuf) -> std::io::Result<Self> {
        Ok(LogSink { out: csv::Writer::from_writer(BufWriter::new(File::create(path)?)) })
    }

    fn append(&mut self, entries: &[SwitchLogEntry]) -> std::io::Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        for e in entries {
            self.out.serialize(e).map_err(std::io::Error::other)?;
        }
        self.out.flush()
    }
}

/// Runs until the controller closes the connection or `shutdown` resolves.
pub async fn run_sim_switch(
    opts: SimSwitchOptions,
    shutdown: impl std::future::Future<Output = ()>,
) -> Result<SwitchStats, SimError> {
    let clock = MonotonicClock::new();
    let mut sw = SimSwitch::new(opts.topology, opts.seed)?;
    let mut sink = match &opts.event_log {
        Some(p) => Some(LogSink::create(p).map_err(|e| SimError::Io(format!("{}: {e}", p.display())))?),
        None => {
            sw.set_logging(false);
            None
        }
    };
    let stream = TcpStream::connect(opts.controller)
        .await
        .map_err(|e| SimError::ConnectFailed(format!("{}: {e}", opts.controller)))?;
    stream.set_nodelay(true).map_err(|e| SimError::Io(e.to_string()))?;
    info!("sim switch connected to {}", opts.controller);
    let (mut rd, mut wr) = stream.into_split();
    sw.connect(clock.now());

    tokio::pin!(shutdown);
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let now = clock.now();
        sw.advance(now);
        for (_, bytes) in sw.take_to_controller(now) {
            wr.write_all(&bytes).await.map_err(|e| SimError::Io(e.to_string()))?;
        }
        if let Some(Err(e)) = sink.as_mut().map(|s| s.append(&sw.take_event_log())) {
            warn!("event log write failed, disabling it: {e}");
            sw.set_logging(false);
            sink = None;
        }
        if sw.is_closed() {
            warn!("sim switch closed its control channel");
            break;
        }
        let wait = sw.next_event_time().map_or(Duration::from_secs(1), |t| t.saturating_since(clock.now()));
        tokio::select! {
            r = rd.read(&mut buf) => match r {
                Ok(0) => {
                    info!("controller closed the connection");
                    break;
                }
                Ok(n) => sw.from_controller(buf[..n].to_vec(), clock.now()),
                Err(e) => return Err(SimError::Io(e.to_string())),
            },
            _ = tokio::time::sleep(wait) => {}
            _ = &mut shutdown => break,
        }
    }
    if let Some(sink) = sink.as_mut() {
        let _ = sink.append(&sw.take_event_log());
    }
    Ok(sw.stats())
}
