//! Sans-IO controller: the probe engine plus every switch session it drives.
//!
//! Transport code owns sockets and a clock. It opens a session per
//! connection, passes received bytes to [`Controller::on_bytes`], writes
//! whatever [`Controller::take_outgoing`] returns, and calls
//! [`Controller::poll`] at [`Controller::next_deadline`].

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use log::{info, warn};

use crate::probeengine::{
    ArpMode, Engine, EngineConfig, EngineError, EngineSnapshot, PingRequest, TaskKind, TracerouteRequest,
};
use crate::session::{SessionError, SessionEvent, SessionId, SwitchSession};
use crate::time::{Timestamp, Timestamped};

pub const DEFAULT_FLOW_PRIORITY: u16 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub engine: EngineConfig,
    /// Priority of the reply rules installed on every switch.
    pub flow_priority: u16,
    /// Port used when a request names none, and for the on-connect ARP.
    pub default_out_port: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { engine: EngineConfig::default(), flow_priority: DEFAULT_FLOW_PRIORITY, default_out_port: 1 }
    }
}

/// Outcome of an explicit [`Controller::sample_switch_rtt`] request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RttSample {
    pub session: SessionId,
    pub xid: u32,
    pub result: Result<Duration, SessionError>,
}

type PacketInTap = Box<dyn FnMut(SessionId, &Timestamped<Vec<u8>>, u32) + Send>;

pub struct Controller {
    config: ControllerConfig,
    engine: Engine,
    sessions: BTreeMap<SessionId, SwitchSession>,
    next_session: u64,
    explicit_samples: BTreeMap<(SessionId, u32), ()>,
    samples: Vec<RttSample>,
    tap: Option<PacketInTap>,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("config", &self.config)
            .field("sessions", &self.sessions.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        Controller {
            engine: Engine::new(config.engine.clone()),
            config,
            sessions: BTreeMap::new(),
            next_session: 1,
            explicit_samples: BTreeMap::new(),
            samples: Vec::new(),
            tap: None,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn session(&self, id: SessionId) -> Option<&SwitchSession> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SwitchSession> {
        self.sessions.values()
    }

    /// The oldest active session, used when a request does not pick one.
    pub fn default_session(&self) -> Option<SessionId> {
        self.sessions.values().find(|s| s.is_active()).map(|s| s.id())
    }

    /// Registers a callback seeing every PacketIn before the engine does.
    pub fn on_packet_in(&mut self, tap: impl FnMut(SessionId, &Timestamped<Vec<u8>>, u32) + Send + 'static) {
        self.tap = Some(Box::new(tap));
    }

    /// Starts a session for a newly connected switch; Hello is queued.
    pub fn open_session(&mut self, now: Timestamp) -> SessionId {
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(id, SwitchSession::new(id, now));
        id
    }

    pub fn close_session(&mut self, id: SessionId) {
        if let Some(mut s) = self.sessions.remove(&id) {
            s.close();
            info!("{id}: closed");
        }
        self.engine.session_closed(id);
        self.explicit_samples.retain(|(s, _), _| *s != id);
    }

    /// Feeds bytes read from a switch connection. An error means the session
    /// has been closed and the connection should be dropped.
    pub fn on_bytes(&mut self, id: SessionId, bytes: &[u8], now: Timestamp) -> Result<(), SessionError> {
        let sess = self.sessions.get_mut(&id).ok_or(SessionError::SessionClosed)?;
        let events = match sess.receive(bytes, now) {
            Ok(ev) => ev,
            Err(e) => {
                self.close_session(id);
                return Err(e);
            }
        };
        self.dispatch(id, events, now);
        Ok(())
    }

    fn dispatch(&mut self, id: SessionId, events: Vec<SessionEvent>, now: Timestamp) {
        for event in events {
            let Some(sess) = self.sessions.get_mut(&id) else { return };
            match &event {
                SessionEvent::Activated { datapath_id } => {
                    info!("{id}: switch {datapath_id:#x} connected");
                    if let Err(e) = sess.install_reply_flows(self.config.engine.probe_src_ip, self.config.flow_priority)
                    {
                        warn!("{id}: installing reply flows failed: {e}");
                    }
                    if self.config.engine.gratuitous_arp == ArpMode::OnConnect {
                        if let Err(e) = self.engine.announce(sess, self.config.default_out_port, now) {
                            warn!("{id}: gratuitous ARP failed: {e}");
                        }
                    }
                    continue;
                }
                SessionEvent::EchoSample { xid, rtt } => {
                    if self.explicit_samples.remove(&(id, *xid)).is_some() {
                        self.samples.push(RttSample { session: id, xid: *xid, result: Ok(*rtt) });
                    }
                }
                SessionEvent::EchoTimeout { xid } => {
                    if self.explicit_samples.remove(&(id, *xid)).is_some() {
                        let err = SessionError::EchoTimeout(crate::session::ECHO_TIMEOUT);
                        self.samples.push(RttSample { session: id, xid: *xid, result: Err(err) });
                    }
                }
                SessionEvent::PacketIn { frame, in_port } => {
                    if let Some(tap) = self.tap.as_mut() {
                        tap(id, frame, *in_port);
                    }
                }
            }
            self.engine.on_session_event(sess, event, now);
        }
    }

    /// Expires handshakes, echoes and probes; sends paced probes.
    pub fn poll(&mut self, now: Timestamp) {
        let ids: Vec<SessionId> = self.sessions.keys().copied().collect();
        for id in ids {
            let Some(sess) = self.sessions.get_mut(&id) else { continue };
            match sess.poll(now) {
                Ok(events) => self.dispatch(id, events, now),
                Err(e) => {
                    warn!("{id}: {e}");
                    self.close_session(id);
                }
            }
        }
        self.engine.poll(&mut self.sessions, now);
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.sessions.values().filter_map(|s| s.next_deadline()).chain(self.engine.next_deadline()).min()
    }

    /// Bytes queued for one session's connection.
    pub fn take_outgoing(&mut self, id: SessionId) -> Vec<u8> {
        self.sessions.get_mut(&id).map(|s| s.take_outgoing()).unwrap_or_default()
    }

    pub fn has_outgoing(&self, id: SessionId) -> bool {
        self.sessions.get(&id).is_some_and(|s| s.has_outgoing())
    }

    fn session_for(&mut self, id: Option<SessionId>) -> Result<&mut SwitchSession, EngineError> {
        let id = id.or_else(|| self.default_session()).ok_or(SessionError::NotActive)?;
        self.sessions.get_mut(&id).ok_or(EngineError::Session(SessionError::SessionClosed))
    }

    pub fn start_ping(
        &mut self,
        session: Option<SessionId>,
        req: &PingRequest,
        now: Timestamp,
    ) -> Result<u16, EngineError> {
        let sess = Self::lookup(&mut self.sessions, session)?;
        self.engine.start_ping(sess, req, now)
    }

    pub fn start_traceroute(
        &mut self,
        session: Option<SessionId>,
        req: &TracerouteRequest,
        now: Timestamp,
    ) -> Result<u16, EngineError> {
        let sess = Self::lookup(&mut self.sessions, session)?;
        self.engine.start_traceroute(sess, req, now)
    }

    pub fn start_router_id_query(
        &mut self,
        session: Option<SessionId>,
        target: Ipv4Addr,
        out_port: u32,
        now: Timestamp,
    ) -> Result<u16, EngineError> {
        let sess = Self::lookup(&mut self.sessions, session)?;
        self.engine.start_router_id_query(sess, target, out_port, now)
    }

    fn lookup(
        sessions: &mut BTreeMap<SessionId, SwitchSession>,
        id: Option<SessionId>,
    ) -> Result<&mut SwitchSession, EngineError> {
        let id = match id {
            Some(id) => id,
            None => sessions.values().find(|s| s.is_active()).map(|s| s.id()).ok_or(SessionError::NotActive)?,
        };
        sessions.get_mut(&id).ok_or(EngineError::Session(SessionError::SessionClosed))
    }

    /// Sends a PacketOut outside any task; returns its send timestamp.
    pub fn send_frame(
        &mut self,
        session: Option<SessionId>,
        out_port: u32,
        frame: Vec<u8>,
        now: Timestamp,
    ) -> Result<Timestamp, EngineError> {
        let sess = self.session_for(session)?;
        Ok(sess.send_packet_out(out_port, frame, now)?)
    }

    /// Requests one controller-to-switch RTT sample. The result appears in
    /// [`take_rtt_samples`](Self::take_rtt_samples) and also feeds the
    /// session's estimator.
    pub fn sample_switch_rtt(
        &mut self,
        session: Option<SessionId>,
        now: Timestamp,
    ) -> Result<(SessionId, u32), EngineError> {
        let sess = self.session_for(session)?;
        let id = sess.id();
        let xid = sess.begin_echo(now)?;
        self.explicit_samples.insert((id, xid), ());
        Ok((id, xid))
    }

    pub fn take_rtt_samples(&mut self) -> Vec<RttSample> {
        std::mem::take(&mut self.samples)
    }

    pub fn dump_state(&self) -> EngineSnapshot {
        self.engine.dump_state()
    }

    pub fn clear_state(&mut self, kind: TaskKind) {
        self.engine.clear_state(kind);
    }
}
