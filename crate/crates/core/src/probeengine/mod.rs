//! Measurement state machines: ping, traceroute and router-ID queries keyed by
//! ICMP identifier, plus the controller-to-switch RTT estimator used to
//! correct probe timings.
//!
//! Every task follows the same life cycle. Starting a task allocates an ICMP
//! identifier, announces the probe source with a gratuitous ARP and sends an
//! echo request to the switch. When the echo reply arrives the estimator is
//! updated, its value is snapshotted as the task's `rtt_cs`, and the probes
//! are emitted. Replies delivered through PacketIn complete the matching
//! [`ProbeRecord`]s; probes unanswered after the probe timeout stay empty.

mod dump;
mod ids;
mod rtt;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::net::Ipv4Addr;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pktlab::{
    self, build_echo_request, build_gratuitous_arp, build_router_id_query, Addressing, EchoProbe, MacAddr, PacketError,
    ParsedReply, ReplyKind, RouterIdentity, DEFAULT_PROBE_TTL,
};
use crate::session::{SessionError, SessionEvent, SessionId, SwitchSession};
use crate::time::{Timestamp, Timestamped};

pub use dump::{
    EngineSnapshot, PingDocument, PingDump, ProbeEntry, RouterIdDocument, RouterIdDump, TracerouteDocument,
    TracerouteDump,
};
pub use ids::{IdAllocator, ID_CAPACITY};
pub use rtt::{RttEstimator, DEFAULT_ALPHA};

pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(3);
pub const MAX_TTL: u8 = 30;
/// Largest probes-per-TTL whose sequence numbers still fit in 16 bits.
pub const MAX_PROBES_PER_TTL: u16 = (65536 / MAX_TTL as u32) as u16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("all 65536 ICMP identifiers are in use; dump and clear the state table")]
    StateFull,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub probe_src_ip: Ipv4Addr,
    pub probe_src_mac: MacAddr,
    pub next_hop_mac: MacAddr,
    pub probe_ttl: u8,
    pub ewma_alpha: f64,
    pub probe_timeout: Duration,
    /// Spacing between successive traceroute probes; zero sends them all at once.
    pub traceroute_gap: Duration,
    pub router_identity: Option<RouterIdentity>,
    pub serve_router_id: bool,
    pub gratuitous_arp: ArpMode,
}

/// When the probe source is announced with a gratuitous ARP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArpMode {
    /// Before every ping and traceroute task.
    #[default]
    PerTask,
    /// Once, when a switch session becomes active.
    OnConnect,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            probe_src_ip: Ipv4Addr::new(192, 0, 2, 10),
            probe_src_mac: MacAddr([0x02, 0, 0, 0, 0, 0x01]),
            next_hop_mac: MacAddr([0x02, 0, 0, 0, 0, 0xfe]),
            probe_ttl: DEFAULT_PROBE_TTL,
            ewma_alpha: DEFAULT_ALPHA,
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            traceroute_gap: Duration::ZERO,
            router_identity: None,
            serve_router_id: false,
            gratuitous_arp: ArpMode::PerTask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ping,
    Traceroute,
    RouterId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    InProgress,
    DestinationReached,
    MaxTtl,
}

/// One emitted probe and, once answered, its reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeRecord {
    pub icmp_id: u16,
    pub icmp_seq: u16,
    pub target: Ipv4Addr,
    pub ttl_sent: u8,
    pub t_out: Timestamp,
    pub t_in: Option<Timestamp>,
    pub responder: Option<Ipv4Addr>,
    /// Set when the probe timeout passed without a reply; late replies are ignored.
    pub expired: bool,
}

impl ProbeRecord {
    fn new(icmp_id: u16, icmp_seq: u16, target: Ipv4Addr, ttl_sent: u8, t_out: Timestamp) -> Self {
        ProbeRecord { icmp_id, icmp_seq, target, ttl_sent, t_out, t_in: None, responder: None, expired: false }
    }

    pub fn is_resolved(&self) -> bool {
        self.t_in.is_some() || self.expired
    }

    /// Elapsed time from PacketOut to PacketIn as seen by the controller.
    pub fn controller_rtt(&self) -> Option<Duration> {
        self.t_in.map(|t| t - self.t_out)
    }
}

/// Corrected switch-to-target round trip: controller-observed elapsed time
/// minus the controller-to-switch round trip, clamped at zero. Unanswered
/// probes have no estimate.
pub fn estimate_rtt(rec: &ProbeRecord, rtt_cs: Duration) -> Option<Duration> {
    rec.controller_rtt().map(|rtt| rtt.saturating_sub(rtt_cs))
}

/// Sequence number of probe `index` at `ttl`.
pub fn traceroute_seq(ttl: u8, probes_per_ttl: u16, index: u16) -> u16 {
    debug_assert!(ttl >= 1 && index < probes_per_ttl);
    ((ttl as u32 - 1) * probes_per_ttl as u32 + index as u32) as u16
}

/// Inverse of [`traceroute_seq`].
pub fn traceroute_ttl_index(seq: u16, probes_per_ttl: u16) -> (u8, u16) {
    ((seq / probes_per_ttl) as u8 + 1, seq % probes_per_ttl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    AwaitingRttCs,
    Probing,
    Failed,
}

#[derive(Debug, Clone)]
pub struct PingRequest {
    pub target: Ipv4Addr,
    pub num: u32,
    pub payload: Vec<u8>,
    pub out_port: u32,
}

#[derive(Debug, Clone)]
pub struct TracerouteRequest {
    pub target: Ipv4Addr,
    pub probes_per_ttl: u16,
    pub out_port: u32,
}

#[derive(Debug, Clone)]
pub struct PingTask {
    pub icmp_id: u16,
    pub target: Ipv4Addr,
    pub num_probes: u32,
    pub payload: Vec<u8>,
    pub out_port: u32,
    pub session: SessionId,
    pub records: BTreeMap<u16, ProbeRecord>,
    pub rtt_cs_at_start: Option<Duration>,
    phase: Phase,
    serial: u64,
}

impl PingTask {
    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Failed
            || (self.records.len() as u32 == self.num_probes && self.records.values().all(|r| r.is_resolved()))
    }

    pub fn estimates(&self) -> Vec<Option<Duration>> {
        let rtt_cs = self.rtt_cs_at_start.unwrap_or_default();
        self.records.values().map(|r| estimate_rtt(r, rtt_cs)).collect()
    }
}

/// One probe's view of a traceroute hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub responder: Option<Ipv4Addr>,
    pub rtt: Option<Duration>,
}

#[derive(Debug, Clone)]
pub struct TracerouteTask {
    pub icmp_id: u16,
    pub target: Ipv4Addr,
    pub probes_per_ttl: u16,
    pub max_ttl: u8,
    pub out_port: u32,
    pub session: SessionId,
    pub records: BTreeMap<u16, ProbeRecord>,
    pub rtt_cs_at_start: Option<Duration>,
    pub terminated: Termination,
    dest_ttl: Option<u8>,
    next_probe: u32,
    phase: Phase,
    serial: u64,
}

impl TracerouteTask {
    fn total_probes(&self) -> u32 {
        self.max_ttl as u32 * self.probes_per_ttl as u32
    }

    fn highest_ttl(&self) -> u8 {
        match self.dest_ttl {
            Some(t) => t,
            None => self.records.values().map(|r| r.ttl_sent).max().unwrap_or(0),
        }
    }

    /// Per-TTL probe records, truncated at the TTL where the target answered.
    pub fn hop_records(&self) -> BTreeMap<u8, Vec<&ProbeRecord>> {
        let limit = self.highest_ttl();
        let mut out: BTreeMap<u8, Vec<&ProbeRecord>> = (1..=limit).map(|t| (t, Vec::new())).collect();
        for r in self.records.values() {
            if let Some(v) = out.get_mut(&r.ttl_sent) {
                v.push(r);
            }
        }
        out
    }

    /// Per-TTL responders and corrected round trips.
    pub fn hops(&self) -> BTreeMap<u8, Vec<Hop>> {
        let rtt_cs = self.rtt_cs_at_start.unwrap_or_default();
        self.hop_records()
            .into_iter()
            .map(|(ttl, recs)| {
                let hops =
                    recs.into_iter().map(|r| Hop { responder: r.responder, rtt: estimate_rtt(r, rtt_cs) }).collect();
                (ttl, hops)
            })
            .collect()
    }

    fn update_termination(&mut self) {
        if self.terminated != Termination::InProgress {
            return;
        }
        if self.dest_ttl.is_some() {
            self.terminated = Termination::DestinationReached;
        } else if self.next_probe == self.total_probes() && self.records.values().all(|r| r.is_resolved()) {
            self.terminated = Termination::MaxTtl;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RouterIdTask {
    pub icmp_id: u16,
    pub target: Ipv4Addr,
    pub record: ProbeRecord,
    pub identity: Option<RouterIdentity>,
    serial: u64,
}

#[derive(Debug, Clone)]
pub enum Task {
    Ping(PingTask),
    Traceroute(TracerouteTask),
    RouterId(RouterIdTask),
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Ping(_) => TaskKind::Ping,
            Task::Traceroute(_) => TaskKind::Traceroute,
            Task::RouterId(_) => TaskKind::RouterId,
        }
    }

    fn serial(&self) -> u64 {
        match self {
            Task::Ping(t) => t.serial,
            Task::Traceroute(t) => t.serial,
            Task::RouterId(t) => t.serial,
        }
    }

    fn record_mut(&mut self, seq: u16) -> Option<&mut ProbeRecord> {
        match self {
            Task::Ping(t) => t.records.get_mut(&seq),
            Task::Traceroute(t) => t.records.get_mut(&seq),
            Task::RouterId(t) => (t.record.icmp_seq == seq).then_some(&mut t.record),
        }
    }
}

/// Counters for replies that did not complete a record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub duplicates: u64,
    pub unknown: u64,
    pub late: u64,
    pub other: u64,
    pub malformed: u64,
    pub router_id_served: u64,
}

/// Lookup of live sessions by id, for work the engine does on its own schedule.
pub trait SessionDirectory {
    fn session_mut(&mut self, id: SessionId) -> Option<&mut SwitchSession>;
}

impl SessionDirectory for SwitchSession {
    fn session_mut(&mut self, id: SessionId) -> Option<&mut SwitchSession> {
        (self.id() == id).then_some(self)
    }
}

impl SessionDirectory for BTreeMap<SessionId, SwitchSession> {
    fn session_mut(&mut self, id: SessionId) -> Option<&mut SwitchSession> {
        self.get_mut(&id)
    }
}

#[derive(Debug)]
pub struct Engine {
    config: EngineConfig,
    ids: IdAllocator,
    tasks: BTreeMap<u16, Task>,
    estimators: HashMap<SessionId, RttEstimator>,
    awaiting_rtt: HashMap<(SessionId, u32), u16>,
    expiries: BinaryHeap<Reverse<(Timestamp, u64, u16, u16)>>,
    paced: BTreeSet<(Timestamp, u16)>,
    next_serial: u64,
    diag: Diagnostics,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        // validate alpha up front rather than on first session
        RttEstimator::new(config.ewma_alpha);
        Engine {
            config,
            ids: IdAllocator::new(),
            tasks: BTreeMap::new(),
            estimators: HashMap::new(),
            awaiting_rtt: HashMap::new(),
            expiries: BinaryHeap::new(),
            paced: BTreeSet::new(),
            next_serial: 0,
            diag: Diagnostics::default(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diag
    }

    pub fn live_ids(&self) -> u32 {
        self.ids.live()
    }

    pub fn task(&self, icmp_id: u16) -> Option<&Task> {
        self.tasks.get(&icmp_id)
    }

    pub fn ping_task(&self, icmp_id: u16) -> Option<&PingTask> {
        match self.tasks.get(&icmp_id) {
            Some(Task::Ping(t)) => Some(t),
            _ => None,
        }
    }

    pub fn traceroute_task(&self, icmp_id: u16) -> Option<&TracerouteTask> {
        match self.tasks.get(&icmp_id) {
            Some(Task::Traceroute(t)) => Some(t),
            _ => None,
        }
    }

    pub fn router_id_task(&self, icmp_id: u16) -> Option<&RouterIdTask> {
        match self.tasks.get(&icmp_id) {
            Some(Task::RouterId(t)) => Some(t),
            _ => None,
        }
    }

    pub fn estimator(&self, session: SessionId) -> Option<&RttEstimator> {
        self.estimators.get(&session)
    }

    pub fn router_identity(&self) -> (Option<&RouterIdentity>, bool) {
        (self.config.router_identity.as_ref(), self.config.serve_router_id)
    }

    pub fn set_router_identity(&mut self, identity: Option<RouterIdentity>, serve: bool) {
        self.config.router_identity = identity;
        self.config.serve_router_id = serve;
    }

    fn serial(&mut self) -> u64 {
        self.next_serial += 1;
        self.next_serial
    }

    fn probe_frame(
        &self,
        target: Ipv4Addr,
        ttl: u8,
        icmp_id: u16,
        icmp_seq: u16,
        payload: &[u8],
    ) -> Result<Vec<u8>, PacketError> {
        build_echo_request(&EchoProbe {
            src_mac: self.config.probe_src_mac,
            dst_mac: self.config.next_hop_mac,
            src_ip: self.config.probe_src_ip,
            dst_ip: target,
            ttl,
            icmp_id,
            icmp_seq,
            payload: payload.to_vec(),
        })
    }

    /// Common task prologue: id allocation, gratuitous ARP and the RTT_C-S echo.
    fn open_task(
        &mut self,
        sess: &mut SwitchSession,
        out_port: u32,
        now: Timestamp,
    ) -> Result<(u16, u32), EngineError> {
        if !sess.is_active() {
            return Err(match sess.state() {
                crate::session::SessionState::Closed => SessionError::SessionClosed,
                _ => SessionError::NotActive,
            }
            .into());
        }
        let id = self.ids.allocate().ok_or(EngineError::StateFull)?;
        let result = match self.config.gratuitous_arp {
            ArpMode::PerTask => self.announce(sess, out_port, now),
            ArpMode::OnConnect => Ok(()),
        }
        .and_then(|_| sess.begin_echo(now));
        match result {
            Ok(xid) => {
                self.awaiting_rtt.insert((sess.id(), xid), id);
                Ok((id, xid))
            }
            Err(e) => {
                self.ids.release(id);
                Err(e.into())
            }
        }
    }

    /// Sends the gratuitous ARP announcing the probe source on `out_port`.
    pub fn announce(&self, sess: &mut SwitchSession, out_port: u32, now: Timestamp) -> Result<(), SessionError> {
        let arp = build_gratuitous_arp(self.config.probe_src_ip, self.config.probe_src_mac);
        sess.send_packet_out(out_port, arp, now).map(|_| ())
    }

    pub fn start_ping(
        &mut self,
        sess: &mut SwitchSession,
        req: &PingRequest,
        now: Timestamp,
    ) -> Result<u16, EngineError> {
        if req.num == 0 || req.num > ID_CAPACITY {
            return Err(EngineError::InvalidRequest(format!("num must be in 1..=65536, got {}", req.num)));
        }
        // reject oversized payloads before anything is sent
        self.probe_frame(req.target, self.config.probe_ttl, 0, 0, &req.payload)?;
        let (id, _) = self.open_task(sess, req.out_port, now)?;
        let serial = self.serial();
        self.tasks.insert(
            id,
            Task::Ping(PingTask {
                icmp_id: id,
                target: req.target,
                num_probes: req.num,
                payload: req.payload.clone(),
                out_port: req.out_port,
                session: sess.id(),
                records: BTreeMap::new(),
                rtt_cs_at_start: None,
                phase: Phase::AwaitingRttCs,
                serial,
            }),
        );
        debug!("ping {id}: {} probes to {}", req.num, req.target);
        Ok(id)
    }

    pub fn start_traceroute(
        &mut self,
        sess: &mut SwitchSession,
        req: &TracerouteRequest,
        now: Timestamp,
    ) -> Result<u16, EngineError> {
        if req.probes_per_ttl == 0 || req.probes_per_ttl > MAX_PROBES_PER_TTL {
            return Err(EngineError::InvalidRequest(format!(
                "probes_per_ttl must be in 1..={MAX_PROBES_PER_TTL}, got {}",
                req.probes_per_ttl
            )));
        }
        let (id, _) = self.open_task(sess, req.out_port, now)?;
        let serial = self.serial();
        self.tasks.insert(
            id,
            Task::Traceroute(TracerouteTask {
                icmp_id: id,
                target: req.target,
                probes_per_ttl: req.probes_per_ttl,
                max_ttl: MAX_TTL,
                out_port: req.out_port,
                session: sess.id(),
                records: BTreeMap::new(),
                rtt_cs_at_start: None,
                terminated: Termination::InProgress,
                dest_ttl: None,
                next_probe: 0,
                phase: Phase::AwaitingRttCs,
                serial,
            }),
        );
        debug!("traceroute {id}: {} probes per ttl to {}", req.probes_per_ttl, req.target);
        Ok(id)
    }

    /// Sends a router-ID query to `target`; the answer arrives as a
    /// [`ReplyKind::RouterIdReply`].
    pub fn start_router_id_query(
        &mut self,
        sess: &mut SwitchSession,
        target: Ipv4Addr,
        out_port: u32,
        now: Timestamp,
    ) -> Result<u16, EngineError> {
        if !sess.is_active() {
            return Err(EngineError::Session(SessionError::NotActive));
        }
        let id = self.ids.allocate().ok_or(EngineError::StateFull)?;
        let addr = Addressing {
            src_mac: self.config.probe_src_mac,
            dst_mac: self.config.next_hop_mac,
            src_ip: self.config.probe_src_ip,
            dst_ip: target,
        };
        let frame = build_router_id_query(&addr, id, 0);
        let t_out = match sess.send_packet_out(out_port, frame, now) {
            Ok(t) => t,
            Err(e) => {
                self.ids.release(id);
                return Err(e.into());
            }
        };
        let serial = self.serial();
        self.expiries.push(Reverse((t_out + self.config.probe_timeout, serial, id, 0)));
        self.tasks.insert(
            id,
            Task::RouterId(RouterIdTask {
                icmp_id: id,
                target,
                record: ProbeRecord::new(id, 0, target, pktlab::DEFAULT_PROBE_TTL, t_out),
                identity: None,
                serial,
            }),
        );
        Ok(id)
    }

    /// Routes a session event to the task it concerns.
    pub fn on_session_event(&mut self, sess: &mut SwitchSession, event: SessionEvent, now: Timestamp) {
        match event {
            SessionEvent::EchoSample { xid, rtt } => {
                let alpha = self.config.ewma_alpha;
                let est = self.estimators.entry(sess.id()).or_insert_with(|| RttEstimator::new(alpha));
                est.update(rtt);
                let current = est.current();
                if let Some(id) = self.awaiting_rtt.remove(&(sess.id(), xid)) {
                    self.begin_probing(sess, id, current, now);
                }
            }
            SessionEvent::EchoTimeout { xid } => {
                if let Some(id) = self.awaiting_rtt.remove(&(sess.id(), xid)) {
                    let current = self.estimators.get(&sess.id()).and_then(|e| e.current());
                    warn!("task {id}: switch echo timed out, using previous estimate {current:?}");
                    self.begin_probing(sess, id, current, now);
                }
            }
            SessionEvent::PacketIn { frame, in_port } => self.on_packet_in(sess, &frame, in_port),
            SessionEvent::Activated { .. } => {}
        }
    }

    fn begin_probing(&mut self, sess: &mut SwitchSession, id: u16, rtt_cs: Option<Duration>, now: Timestamp) {
        let timeout = self.config.probe_timeout;
        let gap = self.config.traceroute_gap;
        let Some(task) = self.tasks.get(&id) else { return };
        let mut frames: Vec<(u16, u8, Vec<u8>)> = Vec::new();
        match task {
            Task::Ping(t) if t.phase == Phase::AwaitingRttCs => {
                for seq in 0..t.num_probes {
                    match self.probe_frame(t.target, self.config.probe_ttl, id, seq as u16, &t.payload) {
                        Ok(f) => frames.push((seq as u16, self.config.probe_ttl, f)),
                        Err(e) => warn!("ping {id}: cannot build probe: {e}"),
                    }
                }
            }
            Task::Traceroute(t) if t.phase == Phase::AwaitingRttCs => {
                let burst = if gap.is_zero() { t.total_probes() } else { 1 };
                let ppt = t.probes_per_ttl;
                for k in 0..burst {
                    let (ttl, _) = traceroute_ttl_index(k as u16, ppt);
                    match self.probe_frame(t.target, ttl, id, k as u16, &[]) {
                        Ok(f) => frames.push((k as u16, ttl, f)),
                        Err(e) => warn!("traceroute {id}: cannot build probe: {e}"),
                    }
                }
            }
            _ => return,
        }

        let serial = task.serial();
        let mut sent: Vec<ProbeRecord> = Vec::with_capacity(frames.len());
        let mut failed = false;
        let (target, out_port) = match task {
            Task::Ping(t) => (t.target, t.out_port),
            Task::Traceroute(t) => (t.target, t.out_port),
            Task::RouterId(t) => (t.target, 0),
        };
        for (seq, ttl, frame) in frames {
            match sess.send_packet_out(out_port, frame, now) {
                Ok(t_out) => {
                    self.expiries.push(Reverse((t_out + timeout, serial, id, seq)));
                    sent.push(ProbeRecord::new(id, seq, target, ttl, t_out));
                }
                Err(e) => {
                    warn!("task {id}: probe emission failed: {e}");
                    failed = true;
                    break;
                }
            }
        }

        match self.tasks.get_mut(&id) {
            Some(Task::Ping(t)) => {
                t.rtt_cs_at_start = rtt_cs;
                t.phase = if failed { Phase::Failed } else { Phase::Probing };
                t.records.extend(sent.into_iter().map(|r| (r.icmp_seq, r)));
            }
            Some(Task::Traceroute(t)) => {
                t.rtt_cs_at_start = rtt_cs;
                t.phase = if failed { Phase::Failed } else { Phase::Probing };
                t.next_probe = sent.len() as u32;
                t.records.extend(sent.into_iter().map(|r| (r.icmp_seq, r)));
                if !failed && t.next_probe < t.total_probes() {
                    self.paced.insert((now + gap, id));
                }
                if failed {
                    t.terminated = Termination::MaxTtl;
                }
            }
            _ => {}
        }
    }

    /// Handles a frame the switch delivered in a PacketIn: router-ID queries
    /// are answered, everything else is matched against outstanding probes.
    pub fn on_packet_in(&mut self, sess: &mut SwitchSession, frame: &Timestamped<Vec<u8>>, in_port: u32) {
        if pktlab::parse_router_id_query(&frame.frame).is_ok() {
            self.router_id_serve(sess, &frame.frame, in_port, frame.at);
            return;
        }
        match pktlab::parse_reply(&frame.frame) {
            Ok(reply) => self.handle_reply(&reply, frame.at),
            Err(e) => {
                debug!("undecodable packet-in: {e}");
                self.diag.malformed += 1;
            }
        }
    }

    /// Answers a router-ID query on the port it arrived on. Returns whether a
    /// reply was sent.
    pub fn router_id_serve(
        &mut self,
        sess: &mut SwitchSession,
        query_frame: &[u8],
        in_port: u32,
        now: Timestamp,
    ) -> bool {
        if !self.config.serve_router_id {
            return false;
        }
        let Some(identity) = self.config.router_identity.as_ref() else {
            return false;
        };
        let Ok(reply) = pktlab::build_router_id_reply(query_frame, identity) else {
            return false;
        };
        match sess.send_packet_out(in_port, reply, now) {
            Ok(_) => {
                self.diag.router_id_served += 1;
                true
            }
            Err(e) => {
                warn!("router-id reply not sent: {e}");
                false
            }
        }
    }

    /// Completes the probe record a reply belongs to. The first reply wins;
    /// later copies only bump the duplicate counter.
    pub fn handle_reply(&mut self, reply: &ParsedReply, t_in: Timestamp) {
        if reply.kind == ReplyKind::Other {
            self.diag.other += 1;
            return;
        }
        let Some(task) = self.tasks.get_mut(&reply.icmp_id) else {
            self.diag.unknown += 1;
            return;
        };
        let accepted = matches!(
            (&reply.kind, task.kind()),
            (ReplyKind::EchoReply, TaskKind::Ping)
                | (ReplyKind::EchoReply | ReplyKind::TimeExceeded, TaskKind::Traceroute)
                | (ReplyKind::RouterIdReply(_), TaskKind::RouterId)
        );
        if !accepted {
            self.diag.unknown += 1;
            return;
        }
        let Some(record) = task.record_mut(reply.icmp_seq) else {
            self.diag.unknown += 1;
            return;
        };
        if record.t_in.is_some() {
            self.diag.duplicates += 1;
            return;
        }
        if record.expired {
            self.diag.late += 1;
            return;
        }
        record.t_in = Some(t_in.max(record.t_out));
        record.responder = Some(reply.responder_ip);
        let ttl_sent = record.ttl_sent;

        match task {
            Task::Traceroute(t) => {
                if reply.kind == ReplyKind::EchoReply {
                    t.dest_ttl = Some(t.dest_ttl.map_or(ttl_sent, |d| d.min(ttl_sent)));
                }
                t.update_termination();
            }
            Task::RouterId(t) => {
                if let ReplyKind::RouterIdReply(identity) = &reply.kind {
                    t.identity = Some(identity.clone());
                }
            }
            Task::Ping(_) => {}
        }
    }

    /// Expires overdue probes and sends paced traceroute probes.
    pub fn poll(&mut self, sessions: &mut impl SessionDirectory, now: Timestamp) {
        while let Some(Reverse((deadline, serial, id, seq))) = self.expiries.peek().copied() {
            if deadline > now {
                break;
            }
            self.expiries.pop();
            let Some(task) = self.tasks.get_mut(&id) else { continue };
            if task.serial() != serial {
                continue;
            }
            if let Some(rec) = task.record_mut(seq) {
                if rec.t_in.is_none() {
                    rec.expired = true;
                }
            }
            if let Task::Traceroute(t) = task {
                t.update_termination();
            }
        }

        while let Some(&(due, id)) = self.paced.first() {
            if due > now {
                break;
            }
            self.paced.pop_first();
            self.send_paced(sessions, id, now);
        }
    }

    fn send_paced(&mut self, sessions: &mut impl SessionDirectory, id: u16, now: Timestamp) {
        let gap = self.config.traceroute_gap;
        let timeout = self.config.probe_timeout;
        let Some(Task::Traceroute(t)) = self.tasks.get(&id) else { return };
        if t.terminated != Termination::InProgress || t.next_probe >= t.total_probes() {
            return;
        }
        let k = t.next_probe as u16;
        let (ttl, _) = traceroute_ttl_index(k, t.probes_per_ttl);
        let Ok(frame) = self.probe_frame(t.target, ttl, id, k, &[]) else { return };
        let (session, out_port, target, serial) = (t.session, t.out_port, t.target, t.serial);
        let Some(sess) = sessions.session_mut(session) else { return };
        let Some(Task::Traceroute(t)) = self.tasks.get_mut(&id) else { return };
        match sess.send_packet_out(out_port, frame, now) {
            Ok(t_out) => {
                t.records.insert(k, ProbeRecord::new(id, k, target, ttl, t_out));
                t.next_probe += 1;
                self.expiries.push(Reverse((t_out + timeout, serial, id, k)));
                if t.next_probe < t.total_probes() {
                    self.paced.insert((now + gap, id));
                }
            }
            Err(e) => {
                warn!("traceroute {id}: paced probe failed: {e}");
                t.phase = Phase::Failed;
                t.terminated = Termination::MaxTtl;
            }
        }
    }

    /// Earliest time at which [`poll`](Self::poll) has work to do.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        let expiry = self.expiries.peek().map(|Reverse((t, ..))| *t);
        let paced = self.paced.first().map(|(t, _)| *t);
        match (expiry, paced) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn dump_state(&self) -> EngineSnapshot {
        let mut snap = EngineSnapshot::default();
        for (&id, task) in &self.tasks {
            match task {
                Task::Ping(t) => {
                    snap.ping.insert(
                        id,
                        PingDump {
                            target: t.target,
                            num: t.num_probes,
                            rtt_cs_us: t.rtt_cs_at_start.map(crate::time::micros),
                            complete: t.is_complete(),
                            probes: t.records.values().map(ProbeEntry::from).collect(),
                        },
                    );
                }
                Task::Traceroute(t) => {
                    snap.traceroute.insert(
                        id,
                        TracerouteDump {
                            target: t.target,
                            probes_per_ttl: t.probes_per_ttl,
                            rtt_cs_us: t.rtt_cs_at_start.map(crate::time::micros),
                            terminated: t.terminated,
                            hops: t
                                .hop_records()
                                .into_values()
                                .map(|recs| recs.into_iter().map(ProbeEntry::from).collect())
                                .collect(),
                        },
                    );
                }
                Task::RouterId(t) => {
                    snap.router_id.insert(
                        id,
                        RouterIdDump {
                            target: t.target,
                            t_out_us: t.record.t_out.as_micros(),
                            t_in_us: t.record.t_in.map(|t| t.as_micros()),
                            responder: t.record.responder,
                            asn: t.identity.as_ref().map(|i| i.asn),
                            ident: t.identity.as_ref().map(|i| i.ident.clone()),
                            complete: t.record.is_resolved(),
                        },
                    );
                }
            }
        }
        snap
    }

    /// Drops every task of `kind` and releases its identifiers.
    pub fn clear_state(&mut self, kind: TaskKind) {
        let ids: Vec<u16> = self.tasks.iter().filter(|(_, t)| t.kind() == kind).map(|(&id, _)| id).collect();
        for id in &ids {
            self.tasks.remove(id);
            self.ids.release(*id);
        }
        self.awaiting_rtt.retain(|_, id| self.tasks.contains_key(id));
        self.paced.retain(|(_, id)| self.tasks.contains_key(id));
        if self.tasks.is_empty() {
            self.expiries.clear();
        }
    }

    pub fn clear_all(&mut self) {
        for kind in [TaskKind::Ping, TaskKind::Traceroute, TaskKind::RouterId] {
            self.clear_state(kind);
        }
    }

    /// Forgets per-session state when a switch disconnects.
    pub fn session_closed(&mut self, session: SessionId) {
        self.estimators.remove(&session);
        self.awaiting_rtt.retain(|(s, _), _| *s != session);
    }
}
