//! Runs the sans-IO controller on tokio: one task per switch connection, one
//! timer task, and the HTTP handlers, all sharing one lock so every engine
//! mutation is atomic with respect to the others.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use log::{info, warn};
use ofprobe_core::controller::Controller;
use ofprobe_core::session::{SessionError, SessionId};
use ofprobe_core::{Clock, MonotonicClock, Timestamp};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};

use crate::config::{ConfigError, DaemonConfig};
use crate::policy::Policy;

/// Longest the timer task sleeps when nothing is scheduled.
const IDLE_TICK: Duration = Duration::from_millis(250);

pub struct State {
    pub controller: Controller,
    pub policy: Policy,
    links: HashMap<SessionId, mpsc::UnboundedSender<Vec<u8>>>,
}

impl State {
    /// Hands every session's queued bytes to its connection writer.
    fn flush(&mut self) {
        for (id, tx) in &self.links {
            let bytes = self.controller.take_outgoing(*id);
            if !bytes.is_empty() {
                // a closed receiver means the connection is going away
                let _ = tx.send(bytes);
            }
        }
    }
}

pub struct Daemon {
    state: Mutex<State>,
    clock: MonotonicClock,
    wake: Notify,
    config: DaemonConfig,
}

/// Guard over the shared state. Dropping it flushes outgoing bytes and wakes
/// the timer task, so callers cannot forget either.
pub struct Locked<'a> {
    guard: MutexGuard<'a, State>,
    daemon: &'a Daemon,
    wake: bool,
}

impl std::ops::Deref for Locked<'_> {
    type Target = State;
    fn deref(&self) -> &State {
        &self.guard
    }
}

impl std::ops::DerefMut for Locked<'_> {
    fn deref_mut(&mut self) -> &mut State {
        &mut self.guard
    }
}

impl Drop for Locked<'_> {
    fn drop(&mut self) {
        self.guard.flush();
        if self.wake {
            self.daemon.wake.notify_one();
        }
    }
}

impl Daemon {
    pub fn new(config: DaemonConfig) -> Result<Arc<Self>, ConfigError> {
        config.validate()?;
        let controller = Controller::new(config.controller_config()?);
        let policy = Policy::new(config.policy.clone());
        Ok(Arc::new(Daemon {
            state: Mutex::new(State { controller, policy, links: HashMap::new() }),
            clock: MonotonicClock::new(),
            wake: Notify::new(),
            config,
        }))
    }

    pub fn config(&self) -> &DaemonConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn lock(&self) -> Locked<'_> {
        self.lock_inner(true)
    }

    fn lock_inner(&self, wake: bool) -> Locked<'_> {
        // a panicking handler must not wedge the daemon
        let guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
        Locked { guard, daemon: self, wake }
    }

    /// Registers a new switch connection. Bytes for it arrive on the receiver.
    pub fn attach(&self) -> (SessionId, mpsc::UnboundedReceiver<Vec<u8>>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut st = self.lock();
        let id = st.controller.open_session(self.now());
        st.links.insert(id, tx);
        (id, rx)
    }

    /// Feeds bytes read from a switch at `at`.
    pub fn receive(&self, id: SessionId, bytes: &[u8], at: Timestamp) -> Result<(), SessionError> {
        let mut st = self.lock();
        let result = st.controller.on_bytes(id, bytes, at);
        if result.is_err() {
            st.links.remove(&id);
        }
        result
    }

    pub fn detach(&self, id: SessionId) {
        let mut st = self.lock();
        st.controller.close_session(id);
        st.links.remove(&id);
    }

    /// Drives handshake, echo and probe timers forever.
    pub async fn run_timers(self: Arc<Self>) {
        loop {
            let wait = {
                let mut st = self.lock_inner(false);
                let now = self.now();
                st.controller.poll(now);
                st.controller.next_deadline().map_or(IDLE_TICK, |d| d.saturating_since(now).min(IDLE_TICK))
            };
            tokio::select! {
                _ = tokio::time::sleep(wait) => {}
                _ = self.wake.notified() => {}
            }
        }
    }

    /// Accepts switch connections forever.
    pub async fn serve_openflow(self: Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        loop {
            let (stream, peer) = listener.accept().await?;
            info!("switch connection from {peer}");
            tokio::spawn(Arc::clone(&self).handle_switch(stream));
        }
    }

    async fn handle_switch(self: Arc<Self>, stream: TcpStream) {
        if let Err(e) = stream.set_nodelay(true) {
            warn!("set_nodelay: {e}");
        }
        let (mut rd, mut wr) = stream.into_split();
        let (id, mut rx) = self.attach();
        let writer = tokio::spawn(async move {
            while let Some(bytes) = rx.recv().await {
                if let Err(e) = wr.write_all(&bytes).await {
                    warn!("{id}: write failed: {e}");
                    break;
                }
            }
        });
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match rd.read(&mut buf).await {
                Ok(0) => {
                    info!("{id}: switch closed the connection");
                    break;
                }
                Ok(n) => {
                    let at = self.now();
                    if let Err(e) = self.receive(id, &buf[..n], at) {
                        warn!("{id}: dropping connection: {e}");
                        break;
                    }
                }
                Err(e) => {
                    warn!("{id}: read failed: {e}");
                    break;
                }
            }
        }
        self.detach(id);
        writer.abort();
    }
}
